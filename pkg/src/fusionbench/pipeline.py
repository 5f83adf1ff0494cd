"""Pipeline stages behind the command line.

Artifacts live under ``<output>/<mode>/``. Every text artifact starts with
'#' header lines carrying the stage's config hash; binary artifacts get a
``.meta`` sidecar with the same header. A stage whose outputs already carry
the current hash is skipped, so reruns are cheap and leave files untouched.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import curve_svg, pca2, robustness_curve, subspace_shift, weight_stream_summary
from .attacks import blur_images, fgsm, transfer_attack
from .config import ExperimentConfig
from .data import (
    cifar10_dataset,
    dump_cfds,
    generate_synthetic_dataset,
    load_cfds,
    normalize,
    normalized_bounds,
    parse_cifar10_batch,
    split,
    unnormalize,
)
from .errors import ConfigError, ValidationError
from .models import STREAMS, build_classifier, deserialize_params, forward_features, serialize_params
from .training import adversarial_retrain, train, train_regularized_joint

RENDERS = ("full", "object", "context")
BASE = ("foreground", "background", "joint")


def alpha_name(alpha):
    return f"joint_alpha{alpha:g}"


class Workspace:
    """Output directory for one config (and one dataset mode)."""

    def __init__(self, cfg: ExperimentConfig, root=None, force=False):
        self.cfg = cfg
        self.root = Path(root if root is not None else cfg["output.dir"])
        self.dir = self.root / cfg.mode
        self.force = force
        self.log = []

    def path(self, name) -> Path:
        return self.dir / name

    def header(self, stage, extra=None):
        items = {"config_hash": self.cfg.hash(stage), "stage": stage, "mode": self.cfg.mode, **(extra or {})}
        return "".join(f"# {k}={v}\n" for k, v in items.items())

    def _stamp_path(self, name):
        p = self.path(name)
        return p if p.suffix in (".csv", ".txt", ".svg") else p.with_name(p.name + ".meta")

    def fresh(self, stage, *names, tags=()) -> bool:
        """True when every named output exists and its header carries the
        current config hash plus each ``key=value`` in ``tags``."""
        if self.force:
            return False
        want = [f"# config_hash={self.cfg.hash(stage)}\n", *(f"# {t}\n" for t in tags)]
        for name in names:
            stamp = self._stamp_path(name)
            if not (self.path(name).exists() and stamp.exists()):
                return False
            head = stamp.read_text(errors="replace")[:4096].replace("<!-- ", "").replace(" -->", "")
            if any(w not in head for w in want):
                return False
        return True

    def write_text(self, stage, name, body, extra=None):
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        if p.suffix == ".svg":
            text = "".join(f"<!-- {ln} -->\n" for ln in self.header(stage, extra).splitlines()) + body
        else:
            text = self.header(stage, extra) + body
        p.write_text(text)
        self.log.append(p)
        return p

    def write_bytes(self, stage, name, data: bytes, extra=None):
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
        p.with_name(p.name + ".meta").write_text(self.header(stage, {"bytes": len(data), **(extra or {})}))
        self.log.append(p)
        return p

    def require(self, name) -> Path:
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"missing artifact {p}; run the producing stage first")
        return p


def read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or "=" not in line:
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


# -- data ---------------------------------------------------------------------------


def stage_data(ws: Workspace):
    cfg = ws.cfg
    if cfg.mode == "cifar10":
        if ws.fresh("gen-data", "data.cfds"):
            return "data up to date"
        path = Path(cfg["dataset.cifar_path"])
        if not cfg["dataset.cifar_path"] or not path.exists():
            raise ConfigError(f"dataset.cifar_path must name a CIFAR-10 batch file, got {str(path)!r}")
        ds = cifar10_dataset(parse_cifar10_batch(path.read_bytes()))
        ws.write_bytes("gen-data", "data.cfds", dump_cfds(ds), {"samples": len(ds)})
        return f"wrote {len(ds)} CIFAR-10 samples"
    names = [f"{r}.cfds" for r in RENDERS]
    if ws.fresh("gen-data", *names):
        return "data up to date"
    meta = cfg.meta()
    for r in RENDERS:
        ds = generate_synthetic_dataset(meta, cfg["dataset.n_per_class"], cfg["dataset.seed"], render=r)
        ws.write_bytes("gen-data", f"{r}.cfds", dump_cfds(ds), {"samples": len(ds), "render": r})
    return f"wrote {len(RENDERS)} renders of {meta.n_classes * cfg['dataset.n_per_class']} samples"


def load_splits(ws: Workspace) -> dict:
    """render -> (train, test); every render is normalized with the full scene's statistics."""
    cfg = ws.cfg
    if cfg.mode == "cifar10":
        raise ConfigError("the object/context pipeline needs a synthetic dataset mode")
    full = load_cfds(ws.require("full.cfds").read_bytes())
    out = {}
    for r in RENDERS:
        ds = full if r == "full" else load_cfds(ws.require(f"{r}.cfds").read_bytes())
        if len(ds) != len(full) or not np.array_equal(ds.labels, full.labels):
            raise ValidationError(f"render {r!r} does not match the full-scene labels")
        ds = replace(ds, meta=replace(full.meta, mode=cfg.mode))
        out[r] = split(ds, cfg["dataset.train_fraction"], cfg["dataset.seed"])
    return out


# -- models -------------------------------------------------------------------------


def save_model(ws, stage, name, clf, hist=None, extra=None):
    ws.write_bytes(stage, f"{name}.fzcp", serialize_params(clf), extra)
    if hist is not None:
        ws.write_text(stage, f"{name}_history.csv", hist.to_csv(), extra)


def load_model(ws, name, frozen=True):
    clf = deserialize_params(ws.require(f"{name}.fzcp").read_bytes())
    clf.name = name
    for ex in clf.extractors.values():
        ex.freeze(frozen)
    return clf


def stage_pretrain(ws: Workspace, splits=None):
    names = ["pretrain_foreground.fzcp", "pretrain_background.fzcp"]
    if ws.fresh("pretrain", *names):
        return "pretrained extractors up to date"
    cfg = ws.cfg
    splits = splits or load_splits(ws)
    n_classes = cfg["dataset.n_classes"]
    msg = []
    for kind, render, s in (("foreground", "object", "fg"), ("background", "context", "bg")):
        clf = build_classifier(kind, cfg.arch(), n_classes, seed=cfg[f"model.{s}_seed"])
        tr, te = splits[render]
        clf, hist = train(clf, tr, cfg.pretrain_config(cfg[f"pretrain.{s}_epochs"]), te)
        save_model(ws, "pretrain", f"pretrain_{kind}", clf, hist, {"render": render})
        msg.append(f"{kind} {hist.test_acc[-1]:.3f}")
    return "pretrained " + ", ".join(msg)


def _pretrained_extractors(ws):
    fg = load_model(ws, "pretrain_foreground").extractors["fg"]
    bg = load_model(ws, "pretrain_background").extractors["bg"]
    return {"fg": fg, "bg": bg}


def stage_train(ws: Workspace, groups=("base", "alpha", "adv"), splits=None):
    """Heads on frozen extractors ("base"), the alpha sweep ("alpha") and the
    adversarially retrained foreground classifier ("adv")."""
    cfg = ws.cfg
    splits = splits or {}
    done = []
    exs = None

    def data():
        if not splits:
            splits.update(load_splits(ws))
        return splits["full"]

    def build(kind):
        nonlocal exs
        exs = exs or _pretrained_extractors(ws)
        sub = {s: exs[s] for s in STREAMS[kind]}
        clf = build_classifier(kind, cfg.arch(), cfg["dataset.n_classes"], seed=cfg["model.head_seed"], extractors=sub)
        for ex in clf.extractors.values():
            ex.freeze()
        clf.name = kind
        return clf

    if "base" in groups and not ws.fresh("train", *(f"{k}.fzcp" for k in BASE)):
        tr, te = data()
        for kind in BASE:
            clf, hist = train(build(kind), tr, cfg.train_config(), te)
            save_model(ws, "train", kind, clf, hist)
        done.append("base")
    if "alpha" in groups:
        names = [f"{alpha_name(a)}.fzcp" for a in cfg["reg.alphas"]]
        if not ws.fresh("train", *names):
            tr, te = data()
            for a in cfg["reg.alphas"]:
                clf = load_model(ws, "joint") if cfg["reg.warm_start"] else build("joint")
                clf.name = alpha_name(a)
                clf, hist = train_regularized_joint(clf, tr, cfg.train_config(), a, te)
                save_model(ws, "train", alpha_name(a), clf, hist, {"alpha": f"{a:g}"})
            done.append("alpha")
    if "adv" in groups and not ws.fresh("train", "foreground_adv.fzcp"):
        tr, te = data()
        rcfg = cfg.retrain_config()
        clf = load_model(ws, "foreground", frozen=rcfg.mode == "head_only")
        clf.name = "foreground_adv"
        clf, hist = adversarial_retrain(clf, tr, cfg["retrain.epsilon"], rcfg, te)
        for ex in clf.extractors.values():
            ex.freeze()
        save_model(ws, "train", "foreground_adv", clf, hist, {"eps_train": f"{cfg['retrain.epsilon']:g}"})
        done.append("adv")
    return "trained " + (", ".join(done) if done else "nothing (up to date)")


def model_names(cfg, groups=("base", "alpha", "adv")):
    names = []
    if "base" in groups:
        names += list(BASE)
    if "alpha" in groups:
        names += [alpha_name(a) for a in cfg["reg.alphas"]]
    if "adv" in groups:
        names.append("foreground_adv")
    return names


def load_models(ws, names):
    return {n: load_model(ws, n) for n in names}


def available_groups(ws):
    g = ["base"]
    if all(ws.path(f"{alpha_name(a)}.fzcp").exists() for a in ws.cfg["reg.alphas"]):
        g.append("alpha")
    if ws.path("foreground_adv.fzcp").exists():
        g.append("adv")
    return tuple(g)


# -- attacks, curves, analysis ------------------------------------------------------------


def _test_set(ws, splits=None):
    return (splits or load_splits(ws))["full"][1]


def stage_attack(ws: Workspace, splits=None):
    """Transfer table under source-crafted FGSM plus the adversarial test sets."""
    cfg = ws.cfg
    grid = cfg["attack.epsilons"]
    names = ["transfer.csv"] + [f"adv_eps{e:g}.cfds" for e in grid]
    listed = model_names(cfg, available_groups(ws))
    if ws.fresh("attack", "transfer.csv", tags=[f"models={','.join(listed)}"]) and ws.fresh("attack", *names):
        return "attack artifacts up to date"
    test = _test_set(ws, splits)
    models = load_models(ws, listed)
    src = models[cfg["attack.source"]]
    targets = [(n, m) for n, m in models.items()]
    bounds = normalized_bounds(test.meta.mean, test.meta.std)
    batch = test.batch()
    rows = []
    for e in grid:
        res = transfer_attack(src, targets, test, e)
        rows.append((e, res))
        adv = fgsm(src, batch.images, batch.targets, e, bounds, src.name).x_adv
        pix = np.clip(unnormalize(adv, test.meta.mean, test.meta.std), 0, 1)
        ws.write_bytes("attack", f"adv_eps{e:g}.cfds", dump_cfds(test.with_images(pix), mode="adversarial"),
                       {"epsilon": f"{e:g}", "source": src.name})
    lines = ["epsilon," + ",".join(n for n, _ in rows[0][1])]
    lines += [f"{e:g}," + ",".join(f"{a:.4f}" for _, a in res) for e, res in rows]
    ws.write_text("attack", "transfer.csv", "\n".join(lines) + "\n",
                  {"models": ",".join(listed), "source": src.name, "samples": len(test)})
    return f"transfer attack from {src.name} over {len(grid)} epsilons"


def write_curve(ws, stage, stem, curve, title):
    hdr = {"models": ",".join(curve.rows)}
    ws.write_text(stage, f"{stem}.csv", curve.to_csv(), hdr)
    ws.write_text(stage, f"{stem}.svg", curve_svg(curve, title), hdr)


def stage_curve(ws: Workspace, kinds=("sigma", "epsilon"), splits=None):
    """Blur curve for the base models; FGSM curves crafted on the configured
    source for every model, and white-box for the foreground pair."""
    cfg = ws.cfg
    listed = model_names(cfg, available_groups(ws))
    plan = []
    if "sigma" in kinds:
        plan.append(("curve_blur", "sigma", list(BASE), None))
    if "epsilon" in kinds:
        plan.append(("curve_fgsm", "epsilon", listed, cfg["attack.source"]))
        plan.append(("curve_fgsm_whitebox", "epsilon", [n for n in ("foreground", "foreground_adv") if n in listed], None))
    todo = [p for p in plan if not ws.fresh("curve", f"{p[0]}.csv", f"{p[0]}.svg", tags=[f"models={','.join(p[2])}"])]
    if not todo:
        return "curves up to date"
    test = _test_set(ws, splits)
    models = load_models(ws, listed)
    for stem, kind, names, source in todo:
        grid = cfg["attack.sigmas"] if kind == "sigma" else cfg["attack.epsilons"]
        c = robustness_curve({n: models[n] for n in names}, test, kind, grid, source=source)
        title = {"curve_blur": "bbox blur", "curve_fgsm": f"FGSM from {source}", "curve_fgsm_whitebox": "white-box FGSM"}[stem]
        write_curve(ws, "curve", stem, c, f"{title} ({cfg.mode})")
    return "curves: " + ", ".join(p[0] for p in todo)


def stage_analyze(ws: Workspace, splits=None):
    cfg = ws.cfg
    names = ["shift.txt", "weights.txt", "pca_fg.csv", "pca_bg.csv"]
    groups = available_groups(ws)
    heads = ["joint"] + ([alpha_name(a) for a in cfg["reg.alphas"]] if "alpha" in groups else [])
    if ws.fresh("analyze", *(n for n in names if n != "weights.txt")) and ws.fresh("analyze", "weights.txt", tags=[f"models={','.join(heads)}"]):
        return "analysis up to date"
    test = _test_set(ws, splits)
    sigma = cfg["attack.shift_sigma"]
    joint = load_model(ws, "joint")
    clean = forward_features(joint, test.normalized_images())
    blurred = normalize(blur_images(test.images, test.bboxes, sigma), test.meta.mean, test.meta.std)
    pert = forward_features(joint, blurred)
    body = ""
    scores = {}
    for s in ("fg", "bg"):
        rep = subspace_shift(clean[s], pert[s], test.labels)
        scores[s] = rep.score
        body += rep.to_kv(f"{s}.")
        model, proj = pca2(np.concatenate([clean[s], pert[s]]))
        n = len(test)
        rows = ["label,blurred,pc1,pc2"]
        rows += [f"{int(test.labels[i % n])},{int(i >= n)},{p[0]:.6f},{p[1]:.6f}" for i, p in enumerate(proj)]
        ws.write_text("analyze", f"pca_{s}.csv", "\n".join(rows) + "\n",
                      {"stream": s, "sigma": f"{sigma:g}", "explained": ",".join(f"{v:.6f}" for v in model.explained_variance)})
    body += f"ratio={scores['fg'] / scores['bg']:.6f}\n"
    ws.write_text("analyze", "shift.txt", body, {"sigma": f"{sigma:g}", "samples": len(test)})
    wbody = "".join(weight_stream_summary(load_model(ws, h).head).to_kv(f"{h}.") for h in heads)
    ws.write_text("analyze", "weights.txt", wbody, {"models": ",".join(heads)})
    return f"shift fg={scores['fg']:.3f} bg={scores['bg']:.3f}"


# -- figure bundles ---------------------------------------------------------------------

FIGURES = {
    "fig2": {"modes": ("dissimilar",), "groups": ("base",), "steps": ("analyze",)},
    "fig3": {"modes": ("dissimilar", "similar"), "groups": ("base",), "steps": ("blur",)},
    "fig4": {"modes": ("dissimilar", "uniform"), "groups": ("base",), "steps": ("fgsm", "analyze")},
    "fig5": {"modes": ("dissimilar",), "groups": ("base", "alpha", "adv"), "steps": ("fgsm", "analyze")},
}


def run_mode(cfg: ExperimentConfig, root, groups, steps, force=False):
    ws = Workspace(cfg, root, force)
    stage_data(ws)
    splits = load_splits(ws)
    stage_pretrain(ws, splits)
    stage_train(ws, groups, splits)
    kinds = tuple(k for k, step in (("sigma", "blur"), ("epsilon", "fgsm")) if step in steps)
    if kinds:
        stage_curve(ws, kinds, splits)
    if "analyze" in steps:
        stage_analyze(ws, splits)
    return ws


def reproduce(cfg: ExperimentConfig, figure, root=None, force=False):
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}; choose from {', '.join(FIGURES)}")
    spec = FIGURES[figure]
    root = Path(root if root is not None else cfg["output.dir"])
    spaces = [run_mode(cfg.replace(dataset__mode=m), root, spec["groups"], spec["steps"], force) for m in spec["modes"]]
    return spaces, summarize(root, spec["modes"])


def summarize(root, modes=("dissimilar", "similar", "uniform")) -> dict:
    """Headline numbers from whatever artifacts exist under ``root``."""
    from .analysis import RobustnessCurve

    out = {}
    for m in modes:
        d = Path(root) / m
        if (d / "shift.txt").exists():
            kv = read_kv(d / "shift.txt")
            out[f"{m}.shift_ratio"] = float(kv["ratio"])
        if (d / "weights.txt").exists():
            for k, v in read_kv(d / "weights.txt").items():
                out[f"{m}.{k}"] = float(v)
        for stem in ("curve_blur", "curve_fgsm", "curve_fgsm_whitebox"):
            p = d / f"{stem}.csv"
            if p.exists():
                c = RobustnessCurve.from_csv(p.read_text())
                for name, accs in c.rows.items():
                    out[f"{m}.{stem}.{name}"] = accs
                out[f"{m}.{stem}.grid"] = c.grid
    return out
