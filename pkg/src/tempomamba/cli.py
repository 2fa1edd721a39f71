"""Command-line entry point: ``tempomamba {verify,bench,ablate,train,sample}``.

Exit codes: 0 success, 1 a check failed, 2 usage error. Every run writes
``manifest.json`` to its output directory with the resolved configuration, so
``--config`` plus ``--seed`` from the manifest replays the run.

CSV columns
    verify   checks.csv     check, value, tolerance, passed, detail
    bench    timings.csv    kind, length, median_seconds, repeats
             slopes.csv     kind, slope, low, high, status
    ablate   ablation.csv   axis, value, seed, final_loss, val_loss, roundtrip_error
    train    loss.csv       step, loss
    sample   samples.csv    class, label, guidance, mean, std
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks
from . import numerics as nm
from . import ssm
from . import temporal_mamba as tm
from . import toy_diffusion as td

ABLATION_AXES = {
    "depth": ("depth", ["1", "2", "4"]),
    "rank": ("rank", ["4", "8", "12"]),
    "padding": ("padding", ["none", "fixed", "learnable"]),
    "phi": ("phi", ["0", "0.5", "1", "learnable"]),
}
SLOPE_BANDS = {"scan": (0.8, 1.2), "attention": (1.7, 2.3)}
DEFAULT_LENGTHS = "256,512,1024,2048,4096,8192,16384"
KNOWN_FAULTS = ("fuse",)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# io helpers

def write_atomic(path: Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    write_atomic(path, buf.getvalue())


def write_manifest(out: Path, command: str, args, config: dict, outputs: list[str], **extra) -> None:
    manifest = {
        "command": command,
        "seed": args.seed,
        "config": config,
        "outputs": sorted(outputs),
        **extra,
    }
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + path.read_text())
    except configparser.Error as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    return dict(parser["run"])


def train_config(args) -> td.TrainConfig:
    values = read_config(args.config)
    try:
        cfg = td.TrainConfig.from_mapping(values)
    except KeyError as exc:
        raise UsageError(f"unknown config key: {exc.args[0]}") from None
    except ValueError as exc:
        raise UsageError(f"bad config value: {exc}") from None
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    try:
        cfg.denoiser_config()
        cfg.dataset_spec()
    except ValueError as exc:
        raise UsageError(f"bad config value: {exc}") from None
    return cfg


def _plot(path: Path, draw) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    draw(ax)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    write_atomic(path, buf.getvalue())


# ---------------------------------------------------------------------------
# verify

def cmd_verify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    for fault in args.inject_fault or []:
        if fault not in KNOWN_FAULTS:
            raise UsageError(f"unknown fault {fault!r}; known: {', '.join(KNOWN_FAULTS)}")
    tm.FAULTS.update(args.inject_fault or [])
    try:
        rows = checks.run_all(seed, jl_trials=args.jl_trials)
    finally:
        tm.FAULTS.difference_update(args.inject_fault or [])
    out = Path(args.out)
    write_csv(out / "checks.csv", ["check", "value", "tolerance", "passed", "detail"],
              [[r.name, _fmt(r.value), _fmt(r.tolerance), int(r.passed), r.detail] for r in rows])
    write_manifest(out, "verify", args, {"seed": seed, "jl_trials": args.jl_trials}, ["checks.csv"],
                   injected_faults=sorted(args.inject_fault or []))
    failed = [r.name for r in rows if not r.passed]
    for r in rows:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:24s} {r.value:.3e} (tol {r.tolerance:.3e}) {r.detail}")
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# bench

def attention_chunked(q, k, v, chunk: int = 1024) -> np.ndarray:
    """Full softmax attention computed a block of queries at a time, so the
    L x L score matrix never exists in memory at once."""
    out = np.empty((q.shape[0], v.shape[1]))
    scale = 1.0 / math.sqrt(q.shape[1])
    for s in range(0, q.shape[0], chunk):
        scores = q[s:s + chunk] @ k.T * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[s:s + chunk] = scores @ v
    return out


def _median_time(fn, repeats: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def fit_slope(lengths, seconds) -> float | None:
    """Least-squares slope of log(time) against log(length); None below two lengths."""
    if len(lengths) < 2:
        return None
    return float(np.polyfit(np.log(lengths), np.log(seconds), 1)[0])


def bench_workloads(L: int, rng, channels: int = 16, state: int = 8, d: int = 64):
    x = rng.standard_normal((L, channels))
    delta = rng.uniform(0.01, 0.1, (L, channels))
    A = -rng.uniform(0.5, 2.0, (channels, state))
    B, C = rng.standard_normal((L, state)), rng.standard_normal((L, state))
    tensors = [nm.Tensor(v) for v in (x, delta, A, B, C)]
    q, k, v = (rng.standard_normal((L, d)) for _ in range(3))
    return (lambda: ssm.selective_scan_core(*tensors)), (lambda: attention_chunked(q, k, v))


def parse_lengths(text: str) -> list[int]:
    try:
        lengths = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--lengths must be comma-separated integers, got {text!r}") from None
    if not lengths or any(n < 1 for n in lengths):
        raise UsageError("--lengths needs at least one positive length")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise UsageError("--lengths must be strictly ascending")
    return lengths


def cmd_bench(args) -> int:
    lengths = parse_lengths(args.lengths)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    seed = 0 if args.seed is None else args.seed
    rng = nm.make_rng(seed)
    timings = {"scan": [], "attention": []}
    for L in lengths:
        scan, attn = bench_workloads(L, rng)
        timings["scan"].append(_median_time(scan, args.repeats))
        timings["attention"].append(_median_time(attn, args.repeats))
        print(f"L={L:6d}  scan {timings['scan'][-1]:.4e}s  attention {timings['attention'][-1]:.4e}s", flush=True)

    out = Path(args.out)
    write_csv(out / "timings.csv", ["kind", "length", "median_seconds", "repeats"],
              [[kind, L, _fmt(s), args.repeats] for kind in timings for L, s in zip(lengths, timings[kind])])
    slope_rows, failed = [], []
    for kind, (lo, hi) in SLOPE_BANDS.items():
        slope = fit_slope(lengths, timings[kind])
        if slope is None:
            status = "n/a"
        else:
            status = "ok" if lo <= slope <= hi else "out-of-band"
            if status != "ok":
                failed.append(kind)
        slope_rows.append([kind, "n/a" if slope is None else f"{slope:.4f}", lo, hi, status])
        print(f"{kind} slope: {'n/a' if slope is None else f'{slope:.3f}'} (expected [{lo}, {hi}]) {status}")
    write_csv(out / "slopes.csv", ["kind", "slope", "low", "high", "status"], slope_rows)

    def draw(ax):
        for kind, ys in timings.items():
            ax.loglog(lengths, ys, "o-", label=kind)
        ax.set_xlabel("sequence length")
        ax.set_ylabel("median seconds")
        ax.legend()

    _plot(out / "scaling.png", draw)
    write_manifest(out, "bench", args, {"seed": seed, "lengths": lengths, "repeats": args.repeats},
                   ["timings.csv", "slopes.csv", "scaling.png"])
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# ablate / train / sample

def run_variant(cfg: td.TrainConfig, roundtrip: bool = True) -> dict:
    result = td.train(cfg)
    row = {"final_loss": float(result.smoothed()[-1]) if result.losses else float("nan"),
           "val_loss": td.validation_loss(result.model, cfg)}
    if roundtrip:
        items = td.make_synthetic_dataset(td.DatasetSpec(cfg.frames, cfg.size, 1), nm.make_rng(10_000 + cfg.seed))
        video, label = items[0]
        c = td.condition_table(3, cfg.cond_dim)[label]
        row["roundtrip_error"] = td.roundtrip_error(result.model, video, c, cfg.schedule(), cfg.sample_steps)
    else:
        row["roundtrip_error"] = float("nan")
    return row


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise UsageError(f"--axis must be one of {', '.join(ABLATION_AXES)}")
    base = train_config(args)
    key, values = ABLATION_AXES[args.axis]
    variants = []
    for value in values:
        cfg = td.TrainConfig.from_mapping({**{k: str(v) for k, v in base.as_dict().items()}, key: value})
        if key == "rank" and int(value) >= cfg.width:
            raise UsageError(f"rank {value} needs width > {value}")
        variants.append((value, cfg))
    rows = []
    for value, cfg in variants:
        res = run_variant(cfg)
        rows.append([args.axis, value, cfg.seed, _fmt(res["final_loss"]), _fmt(res["val_loss"]),
                     _fmt(res["roundtrip_error"])])
        print(f"{args.axis}={value}: final {res['final_loss']:.4f}  val {res['val_loss']:.4f}  "
              f"round-trip {res['roundtrip_error']:.4f}", flush=True)
    out = Path(args.out)
    write_csv(out / "ablation.csv", ["axis", "value", "seed", "final_loss", "val_loss", "roundtrip_error"], rows)

    def draw(ax):
        ax.bar([r[1] for r in rows], [float(r[4]) for r in rows])
        ax.set_xlabel(args.axis)
        ax.set_ylabel("validation loss")

    _plot(out / "ablation.png", draw)
    write_manifest(out, "ablate", args, base.as_dict(), ["ablation.csv", "ablation.png"], axis=args.axis)
    return 0


def cmd_train(args) -> int:
    cfg = train_config(args)
    out = Path(args.out)
    result = td.train(cfg, out_dir=out, log_every=args.log_every)
    sm = result.smoothed()

    def draw(ax):
        ax.plot(result.losses, alpha=0.3, label="loss")
        ax.plot(sm, label="smoothed")
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()

    outputs = ["loss.csv", "checkpoint.tarc"]
    if result.losses:
        _plot(out / "loss.png", draw)
        outputs.append("loss.png")
        print(f"smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}")
    write_manifest(out, "train", args, cfg.as_dict(), outputs)
    return 0


def cmd_sample(args) -> int:
    cfg = train_config(args)
    if args.checkpoint is not None:
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        model = td.load_model(cfg, args.checkpoint)
    else:
        model = td.build_model(cfg)
    guidance = cfg.guidance if args.guidance is None else args.guidance
    spec = cfg.dataset_spec()
    table = td.condition_table(len(spec.classes), cfg.cond_dim)
    rng = nm.make_rng(cfg.seed + 2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, rows, frames = [], [], []
    for label, name in enumerate(spec.classes):
        zT = rng.standard_normal((cfg.frames, 3, cfg.size, cfg.size))
        video = td.ddim_sample(model, zT, table[label], cfg.schedule(), cfg.sample_steps, guidance, clip_denoised=1.0)
        fname = f"sample_{name}.tnsr"
        nm.save_tensor(out / fname, video)
        outputs.append(fname)
        rows.append([name, label, _fmt(guidance), _fmt(video.mean()), _fmt(video.std())])
        frames.append(video)
    write_csv(out / "samples.csv", ["class", "label", "guidance", "mean", "std"], rows)

    def draw(ax):
        strip = np.concatenate([np.concatenate(list(v.transpose(0, 2, 3, 1)), axis=1) for v in frames], axis=0)
        ax.imshow(np.clip((strip + 1) / 2, 0, 1), interpolation="nearest")
        ax.set_axis_off()

    _plot(out / "samples.png", draw)
    write_manifest(out, "sample", args, cfg.as_dict(), outputs + ["samples.csv", "samples.png"],
                   guidance=guidance, checkpoint=None if args.checkpoint is None else str(args.checkpoint))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempomamba", description="Oracle checks, benchmarks and toy training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_out):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=default_out, help="output directory")
        return p

    p = common(sub.add_parser("verify", help="run every oracle check"), "runs/verify")
    p.add_argument("--jl-trials", type=int, default=10_000)
    p.add_argument("--inject-fault", action="append", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = common(sub.add_parser("bench", help="time selective scan against quadratic attention"), "runs/bench")
    p.add_argument("--lengths", default=DEFAULT_LENGTHS, help="comma-separated ascending lengths")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("ablate", help="train the toy model across one axis"), "runs/ablate")
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}")
    p.add_argument("--config")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("train", help="train the toy denoiser"), "runs/train")
    p.add_argument("--config")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("sample", help="DDIM samples with classifier-free guidance"), "runs/sample")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--guidance", type=float, default=None)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
