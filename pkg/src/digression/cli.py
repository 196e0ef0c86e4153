"""Command-line entry point: ``digression <subcommand> ...``.

Exit codes: 0 success, 2 usage (bad flag, missing file, invalid config), 3 validation
failure inside a stage, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import resolve_config
from .errors import ContractViolation, StageError, ValidationError

log = logging.getLogger("digression")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- argument groups ------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="toy checkpoint stem (default: the bundled backend)")
    p.add_argument("--out", help="output directory (default: $DIGRESSION_OUTPUT_DIR/<command>, else ./runs/<command>)")
    p.add_argument("--config", help="INI config file with [budget] [inversion] [timestep] [centroid] [eval] sections")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def _pair(p: argparse.ArgumentParser) -> None:
    p.add_argument("image", help="RGB PNG")
    p.add_argument("mask", help="single-channel PNG, 0 = inpaint region, 255 = context")


def _budget_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attack budget")
    g.add_argument("--epsilon", help="L-inf budget in [0, 1] pixel units (default: 12/255)")
    g.add_argument("--step-size", help="PGD step size (default: 3/255)")
    g.add_argument("--iterations", help="PGD iterations (default: 250)")
    g.add_argument("--grad-avg", help="(z_T, t) draws averaged per PGD step (default: 7)")
    g.add_argument("--norm", choices=["linf", "l2"], help="perturbation norm (default: linf)")


def _inversion_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("token inversion")
    g.add_argument("--num-tokens", help="prompt length (default: 8)")
    g.add_argument("--inversion-steps", help="projected gradient steps (default: 200)")
    g.add_argument("--inversion-lr", help="step size on token embeddings (default: 0.5)")
    g.add_argument("--metric", choices=["cosine", "euclidean"], help="projection metric (default: cosine)")
    g.add_argument("--no-project", action="store_true", help="skip token projection (ablation)")


def _timestep_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("timestep window")
    g.add_argument("--t-mean", help="mean of the timestep distribution (default: 0.72 T = 720)")
    g.add_argument("--t-std", help="std of the timestep distribution (default: 5.8)")


def _centroid_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("centroid")
    g.add_argument("--n-samples", help="Monte Carlo samples for the centroid (default: 32)")
    g.add_argument("--null-text", action="store_true", help="condition on the null prompt instead of inverting")


def _prompt_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("prompt")
    g.add_argument("--tau", help=".npy text embedding (e.g. tau.npy from immunize/invert)")
    g.add_argument("--tokens", help="JSON file with token_ids, or comma-separated ids")


FLAG_KEYS = {
    "epsilon": "budget.epsilon", "step_size": "budget.step_size", "iterations": "budget.iterations",
    "grad_avg": "budget.grad_avg", "norm": "budget.norm", "num_tokens": "inversion.num_tokens",
    "inversion_steps": "inversion.steps", "inversion_lr": "inversion.step_size", "metric": "inversion.metric",
    "t_mean": "timestep.mean", "t_std": "timestep.std", "n_samples": "centroid.n_samples",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="digression",
        description="Immunize images against diffusion inpainting by pushing hidden states away "
                    "from their semantic centroid.",
        epilog="Defaults: epsilon 12/255, step 3/255, 250 iterations, grad_avg 7, "
               "t ~ N(0.72 T, 5.8), 32 centroid samples, 8 prompt tokens.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("immunize", help="invert, estimate the centroid and run the attack")
    _pair(p)
    p.add_argument("--seed", type=int, help="seed for inversion, centroid and attack draws")
    _budget_flags(p)
    _inversion_flags(p)
    _timestep_flags(p)
    _centroid_flags(p)
    _common(p)

    p = sub.add_parser("invert", help="token-projective prompt inversion")
    _pair(p)
    p.add_argument("--seed", type=int)
    _inversion_flags(p)
    _timestep_flags(p)
    _common(p)

    p = sub.add_parser("centroid", help="estimate the hidden-state centroid of a clean image")
    _pair(p)
    p.add_argument("--seed", type=int)
    _prompt_flags(p)
    _timestep_flags(p)
    _centroid_flags(p)
    _common(p)

    p = sub.add_parser("analyze-timesteps", help="PC1 cosine similarity of hidden states across timesteps")
    _pair(p)
    _prompt_flags(p)
    p.add_argument("--t-grid", default="20:1000:20", help="start:stop:step, inclusive (default: 20:1000:20)")
    p.add_argument("--seeds", type=int, default=4, help="number of z_T seeds (default: 4)")
    p.add_argument("--layers", help="comma-separated layer ids (default: finest and coarsest)")
    _common(p)

    p = sub.add_parser("inpaint", help="inpaint the masked region")
    _pair(p)
    _prompt_flags(p)
    p.add_argument("--strength", type=float, default=1.0, help="in (0, 1] (default: 1.0)")
    p.add_argument("--steps", type=int, default=50, help="sampler steps in [10, 100] (default: 50)")
    p.add_argument("--seed", type=int, default=0)
    _common(p)

    p = sub.add_parser("evaluate", help="oracle vs disrupted inpainting metrics")
    p.add_argument("clean", help="clean RGB PNG")
    p.add_argument("immunized", help="immunized RGB PNG")
    p.add_argument("mask")
    _prompt_flags(p)
    p.add_argument("--strengths", help="comma list (default: 0.8,0.9,1.0)")
    p.add_argument("--seeds", help="comma list (default: 0,1,2,3)")
    p.add_argument("--steps", help="sampler steps (default: 50)")
    p.add_argument("--augment", help="comma list of gaussian_noise,jpeg,jitter,rotate_crop")
    p.add_argument("--image-id")
    _common(p)

    p = sub.add_parser("augment", help="apply one robustness augmentation")
    p.add_argument("image")
    p.add_argument("--kind", required=True, choices=["gaussian_noise", "jpeg", "jitter", "rotate_crop"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output PNG path (default: <out root>/augment/<stem>_<kind>.png)")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train-toy", help="train the toy backend on the procedural corpus")
    p.add_argument("--corpus", help="corpus directory (default: bundled)")
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="checkpoint stem (default: <out root>/train-toy/toy_backend)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# -- helpers ------------------------------------------------------------------------

def _overrides(args) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = str(v)
    if getattr(args, "no_project", False):
        out["inversion.project"] = "false"
    if getattr(args, "null_text", False):
        out["centroid.text"] = "null"
    seed = getattr(args, "seed", None)
    if seed is not None and args.command in ("immunize", "invert", "centroid"):
        for key in ("budget.seed", "inversion.seed", "centroid.seed"):
            out[key] = str(seed)
    return out


def _config(args):
    try:
        cfg = resolve_config(args.config, _overrides(args))
        cfg.validate()
    except (ValidationError, FileNotFoundError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return cfg


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"file not found: {p}")


def _backend(args):
    from .backend.checkpoint import load_bundled, load_checkpoint

    if getattr(args, "checkpoint", None):
        stem = Path(args.checkpoint)
        stem = stem.with_suffix("") if stem.suffix in (".npz", ".json") else stem
        _require(stem.with_suffix(".npz"), stem.with_suffix(".json"))
        return load_checkpoint(stem)
    return load_bundled()


def _out_dir(args, default_name: str) -> Path:
    from .pipeline import output_root

    out = Path(args.out) if getattr(args, "out", None) else output_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tau(args, backend, num_tokens: int = 8) -> torch.Tensor:
    if args.tau and args.tokens:
        raise UsageError("give at most one of --tau and --tokens")
    if args.tau:
        _require(args.tau)
        tau = torch.from_numpy(np.load(args.tau)).to(backend.dtype)
        return tau if tau.ndim == 3 else tau[None]
    if args.tokens:
        if Path(args.tokens).is_file():
            ids = json.loads(Path(args.tokens).read_text())["token_ids"]
        else:
            try:
                ids = [int(s) for s in args.tokens.split(",") if s.strip()]
            except ValueError:
                raise UsageError(f"--tokens: not a file or id list: {args.tokens!r}") from None
        table = backend.token_table()
        with torch.no_grad():
            return backend.encode_text(table[torch.as_tensor(ids)][None])
    with torch.no_grad():
        return backend.null_embedding(num_tokens)


def _t_grid(spec: str) -> list[int]:
    try:
        start, stop, step = (int(v) for v in spec.split(":"))
    except ValueError:
        raise UsageError(f"--t-grid expects start:stop:step, got {spec!r}") from None
    return list(range(start, stop + 1, step))


# -- subcommands ----------------------------------------------------------------------

def cmd_immunize(args) -> int:
    from .pipeline import immunize

    _require(args.image, args.mask)
    cfg = _config(args)
    backend = _backend(args)
    out = _out_dir(args, Path(args.image).stem)
    res = immunize(args.image, args.mask, cfg, backend, out)
    t = res.trace
    print(f"immunized -> {out / 'immunized.png'}  loss {t.losses[0]:.4f} -> {t.losses[-1]:.4f}  "
          f"max|delta| {t.linf[-1]:.5f}")
    return EXIT_OK


def cmd_invert(args) -> int:
    from .inversion import invert
    from .masking import load_pair
    from .pipeline import new_manifest, save_tensor, write_loss_csv

    _require(args.image, args.mask)
    cfg = _config(args)
    backend = _backend(args)
    out = _out_dir(args, "invert")
    m = new_manifest("invert", cfg, backend)
    context, mask = load_pair(args.image, args.mask, backend)
    inv_cfg = cfg.inversion(backend.spec.max_timestep)
    m.seeds = {"inversion": inv_cfg.seed}
    t0 = time.perf_counter()
    try:
        res = invert(backend, context, mask, inv_cfg)
    except Exception as exc:
        raise StageError("invert", exc) from exc
    m.timings["invert"] = round(time.perf_counter() - t0, 6)
    m.add_artifact("pi", save_tensor(out / "pi.npy", res.prompt.pi))
    m.add_artifact("tau", save_tensor(out / "tau.npy", res.tau))
    (out / "tokens.json").write_text(json.dumps({"text": "inverted", "token_ids": list(res.prompt.vocab_ids or [])}))
    m.add_artifact("tokens", out / "tokens.json")
    m.add_artifact("inversion_loss", write_loss_csv(out / "inversion_loss.csv", res.losses))
    m.status = "ok"
    m.write(out)
    print(f"tokens {list(res.prompt.vocab_ids or [])}  loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")
    return EXIT_OK


def cmd_centroid(args) -> int:
    from .centroid import estimate_centroid, save_centroid
    from .masking import load_pair
    from .pipeline import new_manifest

    _require(args.image, args.mask)
    cfg = _config(args)
    backend = _backend(args)
    out = _out_dir(args, "centroid")
    c = cfg.centroid()
    m = new_manifest("centroid", cfg, backend)
    m.seeds = {"centroid": c["seed"]}
    context, mask = load_pair(args.image, args.mask, backend)
    tau = _tau(args, backend, cfg.inversion(backend.spec.max_timestep).num_tokens)
    t0 = time.perf_counter()
    centroid = estimate_centroid(backend, context, mask, tau, cfg.timestep_dist(backend.spec.max_timestep),
                                 c["n_samples"], seed=c["seed"])
    m.timings["centroid"] = round(time.perf_counter() - t0, 6)
    stem = save_centroid(centroid, out / "centroid")
    m.add_artifact("centroid", stem.with_suffix(".npz"))
    m.add_artifact("centroid_meta", stem.with_suffix(".json"))
    m.status = "ok"
    m.write(out)
    for layer in centroid.layer_ids:
        print(f"{layer}: standard error {centroid.standard_error(layer):.5f}")
    return EXIT_OK


def cmd_analyze_timesteps(args) -> int:
    import csv

    from .masking import load_pair, make_context
    from .timesteps import collect_hidden_trajectory, eigenfeature_similarity, extreme_resolution_layers

    _require(args.image, args.mask)
    backend = _backend(args)
    out = _out_dir(args, "analyze-timesteps")
    context, mask = load_pair(args.image, args.mask, backend)
    tau = _tau(args, backend)
    grid = _t_grid(args.t_grid)
    layers = args.layers.split(",") if args.layers else extreme_resolution_layers(backend)
    unknown = set(layers) - set(backend.spec.attention_layer_ids)
    if unknown:
        raise UsageError(f"unknown layers {sorted(unknown)}; available {list(backend.spec.attention_layer_ids)}")
    bundles = collect_hidden_trajectory(
        backend, make_context(context, mask)[None], mask.latent.to(backend.dtype), tau, grid, args.seeds
    )
    report = eigenfeature_similarity([b.select(layers) for b in bundles], layers)
    csv_path = out / "timesteps.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "layer", "cosine"])
        for t, layer, cos in report.rows():
            w.writerow([t, layer, f"{cos:.6f}"])
    _plot_curves(report, out / "timesteps.png")
    print(f"wrote {csv_path}")
    return EXIT_OK


def _plot_curves(report, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for layer, curve in report.curves.items():
        ax.plot(report.timesteps, curve, label=layer)
    ax.set_xlabel("timestep t")
    ax.set_ylabel("cos(H_t, PC1)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_inpaint(args) -> int:
    from .evaluation.inpaint import inpaint
    from .masking import load_pair, write_png

    _require(args.image, args.mask)
    backend = _backend(args)
    out = _out_dir(args, "inpaint")
    context, mask = load_pair(args.image, args.mask, backend)
    tau = _tau(args, backend)
    pixels = inpaint(backend, context, mask, tau, args.strength, args.steps, args.seed)
    path = write_png(out / f"{Path(args.image).stem}_s{args.strength:g}_seed{args.seed}.png", pixels)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation.harness import evaluate_pair, write_report
    from .masking import ContextImage, load_pair, read_image

    _require(args.clean, args.immunized, args.mask)
    overrides = {}
    for flag, key in (("strengths", "eval.strengths"), ("seeds", "eval.seeds"), ("steps", "eval.steps"),
                      ("augment", "eval.augmentations")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    args.set = [*args.set, *(f"{k}={v}" for k, v in overrides.items())]
    cfg = _config(args)
    e = cfg.evaluation()
    backend = _backend(args)
    out = _out_dir(args, "evaluate")
    clean, mask = load_pair(args.clean, args.mask, backend)
    imm_pixels = read_image(args.immunized)
    if imm_pixels.shape != clean.pixels.shape:
        raise ValidationError(f"{args.immunized}: shape {tuple(imm_pixels.shape)} != {tuple(clean.pixels.shape)}")
    immunized = ContextImage.from_pixels(imm_pixels, backend, args.immunized)
    tau = _tau(args, backend)
    report = evaluate_pair(backend, clean, immunized, mask, tau, e["strengths"], e["seeds"], e["augmentations"],
                           e["steps"], args.image_id or Path(args.clean).stem)
    paths = write_report(report, out)
    for key, row in report.summary().items():
        print(f"{key:>24}: ssim {row['ssim']:.4f}  psnr {row['psnr']:.2f}")
    print(f"wrote {paths['csv']}")
    return EXIT_OK


def cmd_augment(args) -> int:
    from .evaluation.augment import augment
    from .masking import read_image, write_png
    from .pipeline import output_root

    _require(args.image)
    y = augment(read_image(args.image), args.kind, seed=args.seed)
    path = Path(args.out) if args.out else output_root() / "augment" / f"{Path(args.image).stem}_{args.kind}.png"
    write_png(path, y)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .backend.train import train_toy_backend
    from .corpus import load_corpus
    from .pipeline import output_root

    if args.corpus and not Path(args.corpus).is_dir():
        raise UsageError(f"corpus directory not found: {args.corpus}")
    corpus = load_corpus(args.corpus)
    out = Path(args.out) if args.out else output_root() / "train-toy" / "toy_backend"
    res = train_toy_backend(corpus, args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed, out=out)
    if res.losses:
        print(f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; checkpoint {res.checkpoint}")
    return EXIT_OK


COMMANDS = {
    "immunize": cmd_immunize, "invert": cmd_invert, "centroid": cmd_centroid,
    "analyze-timesteps": cmd_analyze_timesteps, "inpaint": cmd_inpaint, "evaluate": cmd_evaluate,
    "augment": cmd_augment, "train-toy": cmd_train_toy,
}


def parse_and_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"digression {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"digression {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"digression {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(exc.cause, (ValidationError, ContractViolation)) else EXIT_RUNTIME
    except (ValidationError, ContractViolation) as exc:
        print(f"digression {args.command}: error: [validate] {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"digression {args.command}: error: [runtime] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
