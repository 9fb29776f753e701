"""
Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import AmsaVariant
from .bench import FLOP_CONVENTION, PUBLISHED_COSTS, dit_report, sweep, sweep_csv, sweep_json
from .codec import decode, encode, tokenize
from .dit import DitConfig, GridKind, dit_forward
from .errors import ConfigError, ContractError, DivergenceError, NonFiniteError, ShapeError
from .losses import color_diff, gram_texture_diff, metric_dc, metric_ds
from .numcore import Tensor, no_grad
from .params import CheckpointError
from .ppm import PpmError, read_ppm, write_ppm
from .trainer import TrainConfig, TrainState, init_model, load_model, overfit_check, save_model
from .verify import SUITES

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
SCHEMA = 1
METRIC_CONVENTION = "D_C and D_S sum over the four taps and average over frames; gram and color diffs likewise"
DEFAULT_GRID = "8,16,32,64"


class InputError(ValueError):
    pass


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"dims must be positive, got {text!r}")
    return h, w


def _grid(text: str) -> list[int]:
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated sizes, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError(f"grid sizes must be positive, got {text!r}")
    return sizes


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in u64, got {text}")
    return v


_VARIANTS = {"standard": AmsaVariant.STANDARD, "a": AmsaVariant.VARIANT_A, "b": AmsaVariant.VARIANT_B}


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=sorted(_VARIANTS), default=None, help="axial attention wiring")
    p.add_argument("--unimodal", action="store_true", help="self-attention interaction for one-modality input")
    p.add_argument("--no-interaction", action="store_true", help="skip the video/image interaction blocks")


def _dit_config(args, base: DitConfig | None = None) -> DitConfig:
    cfg = base or DitConfig()
    if args.variant is not None:
        cfg = replace(cfg, variant=_VARIANTS[args.variant])
    if args.unimodal:
        cfg = replace(cfg, unimodal=True)
    if args.no_interaction:
        cfg = replace(cfg, interaction_enabled=False)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unist", description="Image/video style transfer with axial attention.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    st = sub.add_parser("stylize", help="stylize PPM frames with one style image")
    st.add_argument("content", nargs="+", type=Path, help="content frames (PPM), video frames first")
    st.add_argument("--style", type=Path, required=True)
    st.add_argument("--out", type=Path, required=True)
    st.add_argument("--checkpoint", type=Path)
    st.add_argument("--seed", type=_seed, default=0)
    st.add_argument("--dims", type=_dims, help="require inputs of this size")
    st.add_argument("--frames", type=int, help="require this many content frames")
    _model_flags(st)

    be = sub.add_parser("bench", help="MSA vs AMSA cost sweep, optionally a DIT report")
    be.add_argument("--grid", type=_grid, default=_grid(DEFAULT_GRID), help=f"square sizes (default {DEFAULT_GRID})")
    be.add_argument("--dims", type=_dims, help="also cost a DIT forward on an HxW token grid")
    be.add_argument("--frames", type=int, default=2, help="content frames for the DIT report")
    be.add_argument("--paper-row", action="store_true", help="print the published figures next to the 32x32 row")
    be.add_argument("--out", type=Path, help="write bench.csv and bench.json here instead of printing CSV")
    be.add_argument("--seed", type=_seed, default=0, help="accepted for uniformity; costs are seed-free")
    _model_flags(be)

    ve = sub.add_parser("verify", help="run self-check suites")
    ve.add_argument("suites", nargs="*", choices=sorted(SUITES) + ["all"], default=["all"])

    tc = sub.add_parser("traincheck", help="overfit a tiny model on procedural data")
    tc.add_argument("--seed", type=_seed, default=0)
    tc.add_argument("--steps", type=int, default=200)
    tc.add_argument("--out", type=Path, required=True)
    tc.add_argument("--checkpoint", type=Path, help="save the trained model here")
    _model_flags(tc)
    return ap


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _read_images(paths, dims) -> np.ndarray:
    imgs = []
    for p in paths:
        try:
            imgs.append(read_ppm(p))
        except OSError as e:
            raise InputError(f"cannot read {p}: {e.strerror or e}") from None
        except PpmError as e:
            raise InputError(f"{p}: {e}") from None
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise InputError(f"images differ in size: {sorted(s[1:] for s in shapes)}")
    (shape,) = shapes
    if dims is not None and shape[1:] != dims:
        raise InputError(f"images are {shape[1]}x{shape[2]}, --dims asked for {dims[0]}x{dims[1]}")
    if shape[1] % 8 or shape[2] % 8:
        raise InputError(f"image size {shape[1]}x{shape[2]} is not divisible by 8")
    return np.stack(imgs)


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_stylize(args) -> int:
    if args.frames is not None and args.frames != len(args.content):
        raise InputError(f"--frames {args.frames} but {len(args.content)} content paths given")
    content = _read_images(args.content, args.dims)
    style = _read_images([args.style], (content.shape[2], content.shape[3]))
    if args.checkpoint:
        if not args.checkpoint.is_file():
            raise InputError(f"checkpoint {args.checkpoint} not found")
        base, codec, dit = load_model(args.checkpoint)
        cfg = _dit_config(args, base)
    else:
        cfg = _dit_config(args)
        codec, dit = init_model(cfg, args.seed)
    t = content.shape[0]
    if cfg.interaction_enabled and not cfg.unimodal and t % 2:
        raise InputError(f"bimodal interaction needs an even frame count (video then images), got {t}; try --unimodal")

    with no_grad():
        taps_c, taps_s = encode(Tensor(content), codec), encode(Tensor(style), codec)
        out = dit_forward(tokenize(taps_c), tokenize(taps_s, GridKind.STYLE), cfg, dit)
        raw = decode(out, codec).data
        cs = np.clip(raw, 0.0, 1.0)
        taps_cs = encode(Tensor(cs), codec)
        metrics = {
            "D_C": metric_dc(taps_cs, taps_c),
            "D_S": metric_ds(taps_cs, taps_s),
            "gram_texture_diff": gram_texture_diff(taps_cs, taps_s),
            "color_diff": color_diff(cs, np.repeat(style, t, 0)),
        }

    args.out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(cs):
        name = f"stylized_{i:03d}.ppm"
        write_ppm(args.out / name, img)
        names.append(name)
    _dump(
        args.out / "metrics.json",
        {
            "schema": SCHEMA,
            "metrics": metrics,
            "metric_convention": METRIC_CONVENTION,
            "outputs": names,
            "content": [str(p) for p in args.content],
            "style": str(args.style),
            "seed": args.seed,
            "checkpoint": str(args.checkpoint) if args.checkpoint else None,
            "config": {
                "frames": t,
                "height": int(content.shape[2]),
                "width": int(content.shape[3]),
                "embed_dim": cfg.embed_dim,
                "heads": cfg.heads,
                "variant": cfg.variant.value,
                "unimodal": cfg.unimodal,
                "interaction": cfg.interaction_enabled,
            },
        },
    )
    print(f"wrote {len(names)} frames and metrics.json to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = sweep(args.grid)
    csv_text = sweep_csv(rows)
    dit_doc = None
    if args.dims:
        h, w = args.dims
        cfg = _dit_config(args)
        dit_doc = dit_report(cfg, args.frames, h, w).to_json()
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "bench.csv").write_text(csv_text)
        (args.out / "bench.json").write_text(sweep_json(rows))
        if dit_doc is not None:
            _dump(args.out / "dit.json", {"schema": SCHEMA, **dit_doc})
    else:
        sys.stdout.write(csv_text)
        if dit_doc is not None:
            print(json.dumps({"schema": SCHEMA, **{k: v for k, v in dit_doc.items() if k != "items"}}, sort_keys=True))
    if args.paper_row:
        m, a = PUBLISHED_COSTS["msa"], PUBLISHED_COSTS["amsa"]
        for r in rows:
            if r.msa.config["H"] == 32:
                print(
                    f"32x32 D=512: ours {r.msa.score_flops / 1e9:.3f}G / {r.amsa.score_flops / 1e9:.3f}G "
                    f"(ratio {r.ratio:g}); paper: {m['gflops']}G / {a['gflops']}G"
                )
                break
        else:
            print(f"paper: {m['gflops']}G / {a['gflops']}G (add 32 to --grid for our matching row)")
        print(f"convention: {FLOP_CONVENTION}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = sorted(SUITES) if "all" in args.suites else list(dict.fromkeys(args.suites))
    failed = 0
    for name in names:
        checks = SUITES[name]()
        worst = max((c.value for c in checks if c.tol > 0), default=0.0)
        bad = [c for c in checks if not c.ok]
        failed += bool(bad)
        print(f"[{'FAIL' if bad else 'PASS'}] {name}: {len(checks) - len(bad)}/{len(checks)} checks, max error {worst:.3e}")
        for c in checks:
            print("    " + c.line())
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_traincheck(args) -> int:
    if args.steps < 1:
        raise InputError(f"--steps must be >= 1, got {args.steps}")
    if args.unimodal:
        raise InputError("traincheck trains the bimodal sequence; --unimodal is not supported here")
    cfg = TrainConfig(steps=args.steps, seed=args.seed, dit=_dit_config(args))
    codec, dit = init_model(cfg.dit, cfg.seed, cfg.codec_channels)
    before = [t.data.copy() for t in _encoder_tensors(codec)]
    state = TrainState(cfg, codec, dit)
    report = overfit_check(cfg, state)
    frozen = all(np.array_equal(a, t.data) for a, t in zip(before, _encoder_tensors(codec)))
    passed = report.ratio <= 0.5 and frozen

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "loss_curve.csv").write_text(report.curve_csv())
    _dump(
        args.out / "report.json",
        {
            "schema": SCHEMA,
            "seed": args.seed,
            "steps": args.steps,
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "ratio": report.ratio,
            "encoder_unchanged": frozen,
            "passed": passed,
        },
    )
    if args.checkpoint:
        save_model(args.checkpoint, cfg.dit, codec, dit)
    print(f"loss {report.initial_loss:.4f} -> {report.final_loss:.4f} (ratio {report.ratio:.3f}); encoder unchanged: {frozen}")
    return EXIT_OK if passed else EXIT_VERIFY


def _encoder_tensors(codec):
    return [t for conv in codec.encoder.convs for t in (conv.w, conv.b)]


COMMANDS = {"stylize": cmd_stylize, "bench": cmd_bench, "verify": cmd_verify, "traincheck": cmd_traincheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (InputError, ShapeError, ConfigError, ContractError, CheckpointError, PpmError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NonFiniteError, DivergenceError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
