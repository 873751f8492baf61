"""Command-line entry points.

Every subcommand accepts ``--config <file.json>`` whose keys are the long option
names (dashes or underscores); explicit flags override file values and unknown
keys are rejected before any work starts. Each run writes ``run.json`` to its
output directory with the resolved configuration and input checksums.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import __version__
from .errors import ConfigError, InvalidInputError, MissingCheckpointError, SynthesisDiverged

logger = logging.getLogger("quasisynth")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_PATH = 0, 1, 2, 3


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _paths(text):
    return [p for p in str(text).split(",") if p.strip()]


# option name -> (type, default, help)
COMMON = {
    "seed": (int, 0, "random seed"),
    "out": (str, None, "output directory"),
}
COMMANDS = {
    "train-classifier": {
        "epsilon": (float, 0.05 * 32 / 224, "perturbation budget in unit-range pixels"),
        "norm": (str, "l2", "l2 or linf"),
        "steps": (int, 7, "PGD steps per attack"),
        "step-size": (float, None, "PGD step size (default 2.5*epsilon/steps)"),
        "epochs": (int, 12, "training epochs"),
        "n-train": (int, 3000, "training images"),
        "n-test": (int, 500, "held-out images"),
        "batch-size": (int, 64, "batch size"),
        "lr": (float, 2e-3, "peak learning rate"),
    },
    "make-fixture": {
        "size": (int, 64, "image side in pixels"),
        "shape": (str, "disk", "object shape"),
        "shift": (float, 0.25, "guide-mask shift as a fraction of the width"),
    },
    "train-ed": {
        "image": (str, None, "source image PNG"),
        "mask": (str, None, "source mask PNG (values 0/255)"),
        "iters": (int, 2000, "training iterations"),
        "lr": (float, 5e-4, "Adam learning rate"),
    },
    "synthesize": {
        "classifier": (str, None, "classifier checkpoint"),
        "ed": (str, None, "encoder-decoder checkpoint"),
        "image": (str, None, "source image PNG"),
        "mask-src": (str, None, "source mask PNG"),
        "mask-dst": (str, None, "guide mask PNG"),
        "preset": (str, "desk", "hyperparameter preset: desk or full"),
        "iters": (int, None, "total iterations"),
        "activation": (int, None, "iteration at which the critic term switches on"),
        "eta": (float, None, "critic weight once active"),
        "gamma": (float, None, "encoder-decoder inversion weight"),
        "kappa": (float, None, "image-space regularizer weight"),
        "nu": (float, None, "feature-statistics weight"),
        "lr": (float, None, "pre-image learning rate"),
        "alpha": (float, None, "TV weight inside the regularizer"),
        "beta": (float, None, "squared-norm weight inside the regularizer"),
        "snapshot-every": (int, None, "snapshot interval"),
        "objective": (str, None, "ce or kl"),
        "resume": (str, None, "state.pt from an earlier run to continue"),
    },
    "grad-study": {
        "epsilons": (_floats, "0,0.0071428571,0.2", "comma-separated budgets"),
        "norm": (str, "l2", "l2 or linf"),
        "images": (int, 20, "number of test images"),
        "epochs": (int, 12, "training epochs per budget"),
        "n-train": (int, 3000, "training images"),
        "classifiers": (_paths, None, "comma-separated checkpoints to use instead of training"),
    },
    "evaluate": {
        "classifier": (str, None, "classifier used as feature extractor"),
        "real": (_paths, None, "comma-separated real images"),
        "fake": (_paths, None, "comma-separated synthesized images (paired with --real)"),
        "layer": (str, "stage1", "layer for SIFID features"),
    },
    "report-params": {
        "arch": (str, "full", "full or desk"),
    },
}
REQUIRED = {
    "train-ed": ("image", "mask", "out"),
    "synthesize": ("classifier", "image", "mask-src", "mask-dst", "out"),
    "evaluate": ("classifier", "real", "fake"),
    "make-fixture": ("out",),
}
HYPER_KEYS = {"iters": "total_iters", "activation": "eta_activation_iter", "eta": "eta", "gamma": "gamma",
              "kappa": "kappa", "nu": "nu", "lr": "lr", "alpha": "alpha", "beta": "beta",
              "snapshot-every": "snapshot_every", "objective": "objective"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quasisynth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with option values")
        for opt, (typ, _, help_) in {**COMMON, **opts}.items():
            p.add_argument(f"--{opt}", type=typ, default=None, help=help_)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults <- config file <- explicit flags, with every key type-checked."""
    spec = {**COMMON, **COMMANDS[command]}
    cfg = {k: v[1] for k, v in spec.items()}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
        for key, value in data.items():
            opt = key.replace("_", "-")
            if opt not in spec:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            typ = spec[opt][0]
            if value is not None:
                try:
                    if typ in (_floats, _paths) and isinstance(value, list):
                        value = typ(",".join(str(v) for v in value))
                    else:
                        value = typ(value)
                except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"bad value for {key!r}: {exc}")
            cfg[opt] = value
    for opt in spec:
        value = getattr(args, opt.replace("-", "_"), None)
        if value is not None:
            cfg[opt] = value
    missing = [opt for opt in REQUIRED.get(command, ()) if cfg.get(opt) in (None, [])]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m for m in missing)}")
    if cfg["out"] is None:
        cfg["out"] = f"runs/{command}"
    return cfg


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_file(path, what: str, command: str | None = None) -> Path:
    p = Path(path)
    if not p.exists():
        hint = f"; create it with `quasisynth {command}`" if command else ""
        if command:
            raise MissingCheckpointError(f"{what} not found: {p}{hint}")
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _write_run(out: Path, command: str, cfg: dict, inputs: dict, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "config": cfg, "inputs_sha256": inputs, "version": __version__}
    if extra:
        record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str))


# --- subcommands ----------------------------------------------------------------------


def cmd_train_classifier(cfg: dict) -> None:
    from .experiments import DeskSetup
    from .plotting import savefig
    from .quasi_robust import PerturbationBudget, save_classifier
    from .experiments import train_desk_classifier

    out = Path(cfg["out"])
    budget = PerturbationBudget(norm=cfg["norm"], epsilon=cfg["epsilon"], steps=cfg["steps"],
                                step_size=cfg["step-size"])
    setup = DeskSetup(n_train=cfg["n-train"], n_test=cfg["n-test"], epochs=cfg["epochs"],
                      batch_size=cfg["batch-size"], lr=cfg["lr"])
    f = train_desk_classifier(budget, setup, seed=cfg["seed"])
    ckpt = save_classifier(f, out / "classifier.pt")
    with open(out / "training_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(f.log[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(f.log)

    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    epochs = [r["epoch"] for r in f.log]
    ax.plot(epochs, [r["clean_acc"] for r in f.log], "o-", label="clean")
    ax.plot(epochs, [r["adv_acc"] for r in f.log], "s--", label=f"PGD {budget.norm} eps={budget.epsilon:g}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("held-out accuracy")
    ax.legend(frameon=False)
    savefig(fig, out / "training_curve.png")
    _write_run(out, "train-classifier", cfg, {}, {"dataset": setup.to_dict(), "budget": asdict(budget),
                                                  "checkpoint_sha256": _file_sha(ckpt)})
    last = f.log[-1]
    print(f"clean_acc={last['clean_acc']:.4f} adv_acc={last['adv_acc']:.4f} -> {ckpt}")


def cmd_make_fixture(cfg: dict) -> None:
    from .data import make_fixture, shift_mask
    from .imaging import save_image, save_mask

    out = Path(cfg["out"])
    x, y = make_fixture(size=cfg["size"], kind=cfg["shape"], seed=cfg["seed"])
    save_image(out / "source.png", x)
    save_mask(out / "mask_src.png", y)
    save_mask(out / "mask_dst.png", shift_mask(y, cfg["shift"]))
    _write_run(out, "make-fixture", cfg, {})
    print(f"wrote source.png, mask_src.png, mask_dst.png to {out}")


def cmd_train_ed(cfg: dict) -> None:
    from .imaging import load_image, load_mask
    from .mask_ed import build_ed, predict_mask, save_ed, train_ed

    image = _require_file(cfg["image"], "source image")
    mask = _require_file(cfg["mask"], "source mask")
    x, y = load_image(image), load_mask(mask)
    e = train_ed(build_ed(seed=cfg["seed"]), x, y, iters=cfg["iters"], lr=cfg["lr"])
    out = Path(cfg["out"])
    ckpt = save_ed(e, out / "ed.pt")
    acc = float((predict_mask(e, x) == y).float().mean())
    _write_run(out, "train-ed", cfg, {"image": _file_sha(image), "mask": _file_sha(mask)},
               {"final_bce": e.final_bce, "pixel_accuracy": acc, "checkpoint_sha256": _file_sha(ckpt)})
    print(f"final_bce={e.final_bce:.5f} pixel_acc={acc:.4f} -> {ckpt}")


def synthesis_hyperparams(cfg: dict):
    from .synthesis import DESK_HYPERPARAMS, HyperParams

    if cfg["preset"] not in ("desk", "full"):
        raise ConfigError(f"preset must be 'desk' or 'full', got {cfg['preset']!r}")
    base = asdict(DESK_HYPERPARAMS if cfg["preset"] == "desk" else HyperParams())
    for opt, key in HYPER_KEYS.items():
        if cfg.get(opt) is not None:
            base[key] = cfg[opt]
    return HyperParams.from_dict(base)


def cmd_synthesize(cfg: dict) -> None:
    from .imaging import load_image, load_mask
    from .mask_ed import load_ed
    from .plotting import plot_loss_curves
    from .quasi_robust import load_classifier
    from .synthesis import run_synthesis

    h = synthesis_hyperparams(cfg)
    if cfg["ed"] is None:
        raise MissingCheckpointError("no encoder-decoder checkpoint given (--ed); create one with `quasisynth train-ed`")
    ed_path = _require_file(cfg["ed"], "encoder-decoder checkpoint", "train-ed")
    clf_path = _require_file(cfg["classifier"], "classifier checkpoint", "train-classifier")
    paths = {k: _require_file(cfg[k], k) for k in ("image", "mask-src", "mask-dst")}
    resume = torch.load(_require_file(cfg["resume"], "resume state"), weights_only=False) if cfg["resume"] else None

    out = Path(cfg["out"])
    x_dst, manifest = run_synthesis(
        load_image(paths["image"]), load_mask(paths["mask-src"]), load_mask(paths["mask-dst"]),
        load_classifier(clf_path), load_ed(ed_path), h, seed=cfg["seed"], out_dir=out, resume=resume,
        state_path=out / "state.pt",
    )
    plot_loss_curves(manifest["loss_history"], out / "loss_curves.png", activation=h.eta_activation_iter)
    inputs = {k: _file_sha(p) for k, p in paths.items()}
    inputs.update(classifier=_file_sha(clf_path), ed=_file_sha(ed_path))
    _write_run(out, "synthesize", cfg, inputs, {"hyperparams": asdict(h), "output_sha256": manifest["output_sha256"]})
    rf = manifest["critic_receptive_field"]
    if rf.get("discrepancy"):
        print(f"note: {rf['note']}")
    print(f"target class {manifest['target_class']}; final total {manifest['final_terms']['total']:.4f} -> {out}")


def cmd_grad_study(cfg: dict) -> None:
    from .experiments import DeskSetup, gradient_study, train_desk_classifier
    from .plotting import plot_alignment, plot_gradient_grid
    from .quasi_robust import PerturbationBudget, load_classifier, save_classifier

    out = Path(cfg["out"])
    setup = DeskSetup(n_train=cfg["n-train"], epochs=cfg["epochs"])
    data = setup.datasets()
    classifiers, budgets = {}, []
    if cfg["classifiers"]:
        for p in cfg["classifiers"]:
            f = load_classifier(_require_file(p, "classifier checkpoint", "train-classifier"))
            eps = f.budget.epsilon if f.budget else 0.0
            classifiers[f"eps{eps:g}"] = f
            budgets.append(eps)
    else:
        for eps in cfg["epsilons"]:
            budget = PerturbationBudget(norm=cfg["norm"], epsilon=eps)
            f = train_desk_classifier(budget, setup, seed=cfg["seed"], data=data)
            save_classifier(f, out / "models" / f"classifier_eps{eps:g}.pt")
            classifiers[f"eps{eps:g}"] = f
            budgets.append(eps)
    images, labels = data[1][0][: cfg["images"]], data[1][1][: cfg["images"]]
    result = gradient_study(classifiers, images, labels, out_dir=out / "gradients")
    with open(out / "alignment.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "mean_edge_alignment", "accuracy"])
        for name in classifiers:
            writer.writerow([name, repr(result["alignment"][name]), repr(result["accuracy"][name])])
    show = min(6, len(images))
    plot_gradient_grid(images[:show].numpy(), {k: v[:show] for k, v in result["grads"].items()},
                       out / "gradients.png")
    plot_alignment(budgets, [result["alignment"][k] for k in classifiers],
                   [result["accuracy"][k] for k in classifiers], out / "alignment.png", cfg["norm"])
    _write_run(out, "grad-study", cfg, {}, {"files": result["files"], "alignment": result["alignment"]})
    for name in classifiers:
        print(f"{name}: alignment={result['alignment'][name]:.4f} accuracy={result['accuracy'][name]:.4f}")


def cmd_evaluate(cfg: dict) -> None:
    from .imaging import load_image
    from .metrics import fid, image_features, sifid
    from .quasi_robust import load_classifier

    clf_path = _require_file(cfg["classifier"], "classifier checkpoint", "train-classifier")
    f = load_classifier(clf_path)
    if len(cfg["real"]) != len(cfg["fake"]):
        raise ConfigError("--real and --fake must list the same number of images")
    real = [load_image(_require_file(p, "image")) for p in cfg["real"]]
    fake = [load_image(_require_file(p, "image")) for p in cfg["fake"]]
    extractor_id = f"{f.descriptor()['arch']}:{f.checksum()[:12]}"
    rows = []
    for rp, fp, xr, xf in zip(cfg["real"], cfg["fake"], real, fake):
        rows.append({"metric": "SIFID", "real": rp, "fake": fp, "value": sifid(xr, xf, f, cfg["layer"]),
                     "extractor": f"{extractor_id}/{cfg['layer']}"})
    if len(real) >= 2 and all(r.shape == real[0].shape for r in real + fake):
        value = fid(image_features(f, torch.stack(real)), image_features(f, torch.stack(fake)))
        rows.append({"metric": "FID", "real": "*", "fake": "*", "value": value, "extractor": f"{extractor_id}/pool"})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["metric", "real", "fake", "value", "extractor"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    (out / "metrics.json").write_text(json.dumps(rows, indent=2))
    _write_run(out, "evaluate", cfg, {p: _file_sha(p) for p in cfg["real"] + cfg["fake"]})
    for r in rows:
        print(f"{r['metric']}\t{r['real']}\t{r['fake']}\t{r['value']:.6f}")


def cmd_report_params(cfg: dict) -> None:
    from .mask_ed import build_ed
    from .metrics import count_params, critic_descriptor, describe_module, ed_descriptor, full_scale_report
    from .patch_critic import DEFAULT_CRITIC, receptive_field_report
    from .quasi_robust import build_classifier

    if cfg["arch"] == "full":
        report = full_scale_report()
    elif cfg["arch"] == "desk":
        parts = {
            "classifier_small_resnet": count_params(describe_module(build_classifier().model)),
            "patch_critic": count_params(critic_descriptor(DEFAULT_CRITIC)),
            "encoder_decoder": count_params(ed_descriptor()),
        }
        assert parts["encoder_decoder"] == count_params(describe_module(build_ed().model))
        report = {"components": parts, "computed_total": sum(parts.values())}
    else:
        raise ConfigError(f"arch must be 'full' or 'desk', got {cfg['arch']!r}")
    report["critic_receptive_field"] = receptive_field_report(DEFAULT_CRITIC)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "params.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["component", "parameters"])
        for name, n in report["components"].items():
            writer.writerow([name, n])
        writer.writerow(["total", report["computed_total"]])
        if "reference_total" in report:
            writer.writerow(["reference_total", report["reference_total"]])
    (out / "params.json").write_text(json.dumps(report, indent=2))
    _write_run(out, "report-params", cfg, {})
    for name, n in report["components"].items():
        print(f"{name}\t{n}")
    print(f"total\t{report['computed_total']}")
    if "reference_total" in report:
        print(f"reference_total\t{report['reference_total']} ({report['reference_total_millions']}, metadata)")
    rf = report["critic_receptive_field"]
    print(f"critic receptive field\t{rf['receptive_field']}")
    if rf.get("discrepancy"):
        print(f"note: {rf['note']}")


HANDLERS = {
    "train-classifier": cmd_train_classifier,
    "make-fixture": cmd_make_fixture,
    "train-ed": cmd_train_ed,
    "synthesize": cmd_synthesize,
    "grad-study": cmd_grad_study,
    "evaluate": cmd_evaluate,
    "report-params": cmd_report_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"quasisynth {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"quasisynth {args.command}: {exc}", file=sys.stderr)
        return EXIT_PATH
    except (InvalidInputError, SynthesisDiverged) as exc:
        print(f"quasisynth {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
