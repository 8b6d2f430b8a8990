"""Command-line pipeline: gen | label | train | eval | compress | render | bench | grad-check.

Every file-producing run writes exactly one run manifest (a JSON snapshot of
the resolved options) next to its primary output; re-running a command from
its manifest reproduces the primary outputs byte for byte (timing fields are
excluded). Exit codes: 0 success, 2 usage error, 3 data error, 4 remote
scorer error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

import evocomp
from evocomp.core import DataError, LabelRecord, Mask, Sample
from evocomp.compressor import (
    CompressorConfig,
    forward,
    grad_check,
    init_params,
    load_params,
    ratio_to_r,
    save_params,
    select_top_r,
    train,
    write_history_csv,
)
from evocomp.evolution import EvoConfig, search
from evocomp.grouping import GroupingConfig, partition, restrict_top_groups
from evocomp.hashing import keyed_u64
from evocomp.io import (
    read_anchor_container,
    read_container,
    read_labels,
    write_anchor_container,
    write_container,
    write_labels,
)
from evocomp.losses import GhmConfig
from evocomp.scorers import (
    DelayScorer,
    ScorerError,
    ScorerProtocolError,
    ScorerSpec,
    ScorerTimeout,
    ScorerTransportError,
    RemoteScorerFailure,
    brute_force_best,
    make_scorer,
)
from evocomp.synth import gen_planted, gen_pooled

log = logging.getLogger("evocomp")

DEFAULT_SEED = 0

# Built-in defaults for the search and training loops; flags and config files
# override them.
DEFAULTS = {
    "population_size": 48,
    "parent_count": 12,
    "iterations": 10,
    "crossover_prob": 0.9,
    "mutation_prob": 0.2,
    "epochs": 30,
    "lr0": 0.003,
    "alpha": 1.0,
    "ghm_mode": "unit_region",
    "ghm_bins": 100,
    "batch_size": 64,
    "remote_timeout_s": 30.0,
}


class UsageError(Exception):
    """Bad flag combination or value; maps to exit code 2."""


def _default_seed() -> int:
    env = os.environ.get("EVOCOMP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"EVOCOMP_SEED must be an integer, got {env!r}") from exc
    return DEFAULT_SEED


# ---------------------------------------------------------------------------
# Run manifests


def write_run_manifest(path: Path, command: str, opts: dict, outputs: list[str], wall_clock: float) -> None:
    manifest = {
        "tool": "evocomp",
        "version": evocomp.__version__,
        "command": command,
        "options": opts,
        "outputs": outputs,
        "wall_clock_s": wall_clock,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def rerun_manifest(path: str | Path) -> list[str]:
    """Re-execute a command from its run manifest; returns the output paths."""
    manifest = json.loads(Path(path).read_text())
    command = manifest["command"]
    if command not in COMMANDS:
        raise DataError(f"manifest names unknown command {command!r}")
    return COMMANDS[command](dict(manifest["options"]))


def _run(command: str, opts: dict, manifest_file: Path | None):
    started = time.monotonic()
    outputs = COMMANDS[command](opts)
    if manifest_file is not None:
        write_run_manifest(manifest_file, command, opts, outputs, time.monotonic() - started)
    return outputs


# ---------------------------------------------------------------------------
# gen


def cmd_gen(opts: dict) -> list[str]:
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    family = opts["family"]
    samples_path = out_dir / "samples.evc"
    anchors_path = out_dir / "anchors.evc"
    outputs = [str(samples_path), str(anchors_path)]

    if family == "planted":
        ds = gen_planted(
            n_samples=opts["n_samples"],
            tokens=opts["tokens"],
            groups=opts["groups"],
            dim=opts["dim"],
            seed=opts["seed"],
            scorer_seed=opts["scorer_seed"],
            text_tokens=opts["text_tokens"],
            noise=opts["noise"],
            marker_scale=opts["marker_scale"],
        )
        write_container(samples_path, ds.samples)
        write_anchor_container(anchors_path, ds.anchors)
        truth_path = out_dir / "truth.jsonl"
        write_labels(truth_path, ds.truth)
        outputs.append(str(truth_path))
    elif family == "pooled":
        samples, anchors = gen_pooled(
            n_samples=opts["n_samples"],
            tokens=opts["tokens"],
            dim=opts["dim"],
            seed=opts["seed"],
            text_tokens=opts["text_tokens"],
            anchor_count=opts["groups"],
        )
        write_container(samples_path, samples)
        write_anchor_container(anchors_path, anchors)
    else:
        raise UsageError(f"unknown family {family!r}")
    log.info("gen: wrote %d samples to %s", opts["n_samples"], out_dir)
    return outputs


# ---------------------------------------------------------------------------
# label


def _parse_restrict(text: str | None) -> GroupingConfig:
    if text is None or text == "none":
        return GroupingConfig()
    key, _, value = text.partition("=")
    if key == "top_k" and value:
        return GroupingConfig(top_k=int(value))
    if key == "fraction" and value:
        return GroupingConfig(top_fraction=float(value))
    raise UsageError(f"--restrict must be top_k=K, fraction=F, or none (got {text!r})")


def _label_one(sample, anchors, scorer, restrict_cfg, evo_opts, global_seed, oracle, trace_rows):
    part = restrict_top_groups(partition(sample, anchors), restrict_cfg)
    if oracle:
        mask, loss = brute_force_best(sample, part, scorer)
        return LabelRecord(
            sample_id=sample.id,
            mask=mask,
            loss=loss,
            partition_digest=part.digest(),
            scorer_id=scorer.scorer_id,
            seed=global_seed,
        )
    cfg = EvoConfig(
        population_size=evo_opts["population_size"],
        parent_count=evo_opts["parent_count"],
        iterations=evo_opts["iterations"],
        crossover_prob=evo_opts["crossover_prob"],
        mutation_prob=evo_opts["mutation_prob"],
        seed=keyed_u64("evocomp/label-seed", global_seed, sample.id.encode("utf-8")),
    )
    hook = None
    if trace_rows is not None:
        def hook(iteration, best_loss, evaluations, _sid=sample.id):
            trace_rows.append(
                {"sample_id": _sid, "iteration": iteration, "best_loss": best_loss, "evaluations": evaluations}
            )
    return search(sample, part, scorer, cfg, eval_workers=evo_opts["eval_workers"], on_iteration=hook)


def cmd_label(opts: dict) -> list[str]:
    samples = read_container(opts["data"])
    anchors = read_anchor_container(opts["anchors"])
    restrict_cfg = _parse_restrict(opts.get("restrict"))
    spec = ScorerSpec(
        kind=opts["scorer"],
        seed=opts["scorer_seed"],
        endpoint=opts.get("endpoint"),
        concurrency=opts.get("concurrency", "safe"),
    )
    scorer = make_scorer(spec, dataset_path=opts["data"], timeout=opts.get("timeout", DEFAULTS["remote_timeout_s"]))
    trace_rows = [] if opts.get("trace") else None
    evo_opts = {
        k: opts[k]
        for k in ("population_size", "parent_count", "iterations", "crossover_prob", "mutation_prob", "eval_workers")
    }

    try:
        workers = opts.get("workers", 1)
        if workers > 1 and scorer.concurrent_safe:
            # Per-sample traces are collected per worker and stitched back in
            # dataset order afterwards so output bytes never depend on timing.
            per_sample_traces = [[] if trace_rows is not None else None for _ in samples]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(
                    pool.map(
                        lambda iv: _label_one(
                            iv[1], anchors, scorer, restrict_cfg, evo_opts,
                            opts["seed"], opts.get("oracle", False), per_sample_traces[iv[0]],
                        ),
                        enumerate(samples),
                    )
                )
            if trace_rows is not None:
                for rows in per_sample_traces:
                    trace_rows.extend(rows)
        else:
            records = [
                _label_one(s, anchors, scorer, restrict_cfg, evo_opts, opts["seed"],
                           opts.get("oracle", False), trace_rows)
                for s in samples
            ]
    finally:
        scorer.close()

    out = Path(opts["out"])
    write_labels(out, records)
    outputs = [str(out)]
    if trace_rows is not None:
        trace_path = Path(opts["trace"])
        trace_path.write_text("".join(json.dumps(r, separators=(",", ":")) + "\n" for r in trace_rows))
        outputs.append(str(trace_path))
    log.info("label: %d records -> %s", len(records), out)
    return outputs


# ---------------------------------------------------------------------------
# train


def _parse_loss_arm(text: str) -> tuple[str, bool]:
    base, _, cs = text.partition("+")
    if base not in ("ghm", "ce", "focal") or (cs and cs != "cs"):
        raise UsageError(f"--loss must be one of ghm+cs|ghm|ce+cs|ce|focal+cs (got {text!r})")
    return base, bool(cs)


def _ghm_config(opts: dict) -> GhmConfig:
    return GhmConfig(
        mode=opts.get("ghm_mode", DEFAULTS["ghm_mode"]),
        bins=opts.get("ghm_bins", DEFAULTS["ghm_bins"]),
        epsilon=opts.get("ghm_eps"),
        momentum=opts.get("ghm_momentum", 0.0),
    )


def cmd_train(opts: dict) -> list[str]:
    samples = read_container(opts["data"])
    labels = read_labels(opts["labels"])
    base_loss, use_cs = _parse_loss_arm(opts["loss"])
    d_model = opts.get("d_model") or samples[0].d
    cfg = CompressorConfig(
        d_model=d_model,
        heads=opts["heads"],
        mlp_ratio=opts["mlp_ratio"],
        use_positions=opts.get("use_positions", False),
        epochs=opts["epochs"],
        lr0=opts["lr0"],
        batch_size=opts["batch_size"],
        alpha=opts["alpha"],
        ghm=_ghm_config(opts),
        seed=opts["seed"],
    )
    result = train(
        samples,
        labels,
        cfg,
        base_loss=base_loss,
        use_cs=use_cs,
        focal_gamma=opts.get("focal_gamma", 2.0),
        focal_alpha=opts.get("focal_alpha", 0.25),
        density_scope=opts.get("density_scope", "batch"),
        donor=opts.get("donor"),
        no_text=opts.get("no_text", False),
        log_fn=lambda epoch, tr, val: log.info("epoch=%d train=%.6g val=%.6g", epoch, tr, val),
    )
    out = Path(opts["out"])
    extra = {"loss": opts["loss"], "no_text": opts.get("no_text", False), "best_epoch": result.best_epoch}
    save_params(out, result.params, cfg, extra=extra)
    outputs = [str(out)]
    if opts.get("history"):
        write_history_csv(opts["history"], result.history)
        outputs.append(opts["history"])
    log.info("train: best epoch %d -> %s", result.best_epoch, out)
    return outputs


# ---------------------------------------------------------------------------
# eval / compress


def _prf(pred: Mask, ref: Mask) -> tuple[float, float, float]:
    tp = sum(a & b for a, b in zip(pred.bits, ref.bits))
    p = tp / pred.retained if pred.retained else 0.0
    r = tp / ref.retained if ref.retained else 0.0
    f1 = 2 * tp / (pred.retained + ref.retained) if (pred.retained + ref.retained) else 1.0
    return p, r, f1


def _predict_probs(sample: Sample, params, cfg: CompressorConfig, no_text: bool) -> np.ndarray:
    if no_text:
        sample = Sample(id=sample.id, visual=sample.visual, text=np.zeros((0, sample.d)))
    return forward(sample, params, cfg).probs


def _pick_r(opts: dict, sample: Sample, label: LabelRecord | None) -> int:
    if opts.get("r") is not None:
        return opts["r"]
    if opts.get("ratio") is not None:
        return ratio_to_r(opts["ratio"], sample.n)
    if label is not None:
        return label.mask.retained
    raise UsageError("need --r or --ratio when no label file fixes the retention count")


def cmd_eval(opts: dict) -> list[str]:
    samples = read_container(opts["data"])
    params, header = load_params(opts["params"])
    cfg = CompressorConfig.from_header(header)
    no_text = header.get("no_text", False)
    labels = {r.sample_id: r for r in read_labels(opts["labels"])}
    truth = {}
    if opts.get("truth"):
        truth = {r.sample_id: r for r in read_labels(opts["truth"])}
    untrained = init_params(cfg, rng=np.random.default_rng(cfg.seed))
    baseline_seed = opts.get("baseline_seed", 0)

    per_sample = []
    for sample in samples:
        label = labels.get(sample.id)
        if label is None:
            raise DataError(f"no label for sample {sample.id!r}")
        r = _pick_r(opts, sample, label)
        pred = select_top_r(_predict_probs(sample, params, cfg, no_text), r)
        rand_rng = random.Random(keyed_u64("evocomp/eval-random", baseline_seed, sample.id.encode("utf-8")))
        rand_bits = [0] * sample.n
        for i in rand_rng.sample(range(sample.n), r):
            rand_bits[i] = 1
        rand = Mask(bits=tuple(rand_bits))
        untr = select_top_r(_predict_probs(sample, untrained, cfg, no_text), r)

        row = {"sample_id": sample.id, "r": r}
        for name, mask in (("trained", pred), ("random", rand), ("untrained", untr)):
            p, rec, f1 = _prf(mask, label.mask)
            row[name] = {"precision": p, "recall": rec, "f1": f1}
        if sample.id in truth:
            t = truth[sample.id].mask
            row["planted_recall"] = sum(a & b for a, b in zip(pred.bits, t.bits)) / max(1, t.retained)
        per_sample.append(row)

    aggregate = {}
    for name in ("trained", "random", "untrained"):
        for metric in ("precision", "recall", "f1"):
            aggregate[f"{name}_{metric}"] = float(np.mean([row[name][metric] for row in per_sample]))
    if truth:
        aggregate["planted_recall"] = float(
            np.mean([row["planted_recall"] for row in per_sample if "planted_recall" in row])
        )
    report = {"aggregate": aggregate, "per_sample": per_sample}

    out = Path(opts["out"])
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = ["metric      trained   random    untrained"]
    for metric in ("precision", "recall", "f1"):
        lines.append(
            f"{metric:<10}  {aggregate['trained_' + metric]:<8.4f}  "
            f"{aggregate['random_' + metric]:<8.4f}  {aggregate['untrained_' + metric]:<8.4f}"
        )
    if "planted_recall" in aggregate:
        lines.append(f"planted_recall (trained): {aggregate['planted_recall']:.4f}")
    print("\n".join(lines))
    return [str(out)]


def cmd_compress(opts: dict) -> list[str]:
    samples = read_container(opts["data"])
    params, header = load_params(opts["params"])
    cfg = CompressorConfig.from_header(header)
    no_text = header.get("no_text", False)
    rows = []
    for sample in samples:
        r = _pick_r(opts, sample, None)
        mask = select_top_r(_predict_probs(sample, params, cfg, no_text), r)
        rows.append({"sample_id": sample.id, "mask": list(mask.bits), "r": r})
    out = Path(opts["out"])
    out.write_text("".join(json.dumps(row, separators=(",", ":")) + "\n" for row in rows))
    log.info("compress: %d masks -> %s", len(rows), out)
    return [str(out)]


# ---------------------------------------------------------------------------
# render


def render_grid(bits: tuple[int, ...], width: int, fmt: str) -> bytes:
    """Deterministic grid rendering: kept tokens marked, dropped dimmed, the
    last row padded."""
    if width < 1:
        raise UsageError("grid width must be >= 1")
    rows = -(-len(bits) // width)
    if fmt == "text":
        lines = []
        for r in range(rows):
            chunk = bits[r * width : (r + 1) * width]
            line = "".join("#" if b else "." for b in chunk).ljust(width, " ")
            lines.append(line)
        return ("\n".join(lines) + "\n").encode("ascii")
    if fmt == "ppm":
        header = f"P6\n{width} {rows}\n255\n".encode("ascii")
        body = bytearray()
        for i in range(rows * width):
            if i < len(bits):
                body.extend((255, 255, 255) if bits[i] else (40, 40, 40))
            else:
                body.extend((0, 0, 0))
        return header + bytes(body)
    raise UsageError(f"unknown render format {fmt!r}")


def cmd_render(opts: dict) -> list[str]:
    masks_file = Path(opts["masks"])
    target = None
    for line in masks_file.read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj.get("sample_id") == opts["sample_id"]:
            target = obj["mask"]
            break
    if target is None:
        raise DataError(f"sample {opts['sample_id']!r} not found in {masks_file}")
    blob = render_grid(tuple(int(b) for b in target), opts["width"], opts["format"])
    out = Path(opts["out"])
    out.write_bytes(blob)
    return [str(out)]


# ---------------------------------------------------------------------------
# bench


def cmd_bench(opts: dict) -> list[str]:
    samples = read_container(opts["data"])
    if opts.get("limit"):
        samples = samples[: opts["limit"]]
    report = {"per_workers": {}, "samples": len(samples)}
    if samples:
        anchors = read_anchor_container(opts["anchors"])
        for workers in opts["workers_list"]:
            scorer = make_scorer(ScorerSpec(kind=opts["scorer"], seed=opts["scorer_seed"]))
            if opts.get("latency_ms", 0.0) > 0:
                scorer = DelayScorer(scorer, opts["latency_ms"] / 1000.0)
            evals = 0
            started = time.perf_counter()
            for i, sample in enumerate(samples):
                part = partition(sample, anchors)
                cfg = EvoConfig(
                    population_size=opts["population_size"],
                    parent_count=opts["parent_count"],
                    iterations=opts["iterations"],
                    seed=keyed_u64("evocomp/label-seed", opts["seed"], sample.id.encode("utf-8")),
                )
                search(sample, part, scorer, cfg, eval_workers=workers)
                evals += opts["population_size"] * (opts["iterations"] + 1)
            elapsed = time.perf_counter() - started
            report["per_workers"][str(workers)] = {
                "masks_per_second": evals / elapsed if elapsed > 0 else 0.0,
                "wall_clock_per_sample_s": elapsed / len(samples),
                "evaluations": evals,
            }
    out = Path(opts["out"])
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for workers, row in report["per_workers"].items():
        print(f"workers={workers}: {row['masks_per_second']:.1f} masks/s, "
              f"{row['wall_clock_per_sample_s'] * 1000:.1f} ms/sample")
    return [str(out)]


# ---------------------------------------------------------------------------
# grad-check


def cmd_grad_check(opts: dict) -> list[str]:
    rng = np.random.default_rng(opts["seed"])
    worst = 0.0
    for trial in range(opts["trials"]):
        cfg = CompressorConfig(
            d_model=opts["d_model"],
            heads=opts["heads"],
            alpha=opts["alpha"],
            ghm=GhmConfig(bins=opts["ghm_bins"]),
            seed=opts["seed"] + trial,
        )
        params = init_params(cfg, rng=rng)
        n, m = opts["tokens"], opts["text_tokens"]
        sample = Sample(
            id=f"gradcheck{trial}",
            visual=rng.normal(size=(n, cfg.d_model)),
            text=rng.normal(size=(m, cfg.d_model)),
        )
        bits = [1 if rng.random() < 0.3 else 0 for _ in range(n)]
        if sum(bits) == 0:
            bits[0] = 1
        err = grad_check(params, sample, bits, cfg, h=opts["h"], rng=rng)
        worst = max(worst, err)
        print(f"trial {trial}: max relative error {err:.3e}")
    print(f"worst over {opts['trials']} trial(s): {worst:.3e}")
    outputs = []
    if opts.get("out"):
        Path(opts["out"]).write_text(json.dumps({"max_relative_error": worst}, sort_keys=True) + "\n")
        outputs.append(opts["out"])
    return outputs


COMMANDS = {
    "gen": cmd_gen,
    "label": cmd_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "compress": cmd_compress,
    "render": cmd_render,
    "bench": cmd_bench,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------------------
# Argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evocomp", description=__doc__)
    parser.add_argument("--show-defaults", action="store_true", help="print built-in defaults and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--family", choices=["planted", "pooled"], default="planted")
    gen.add_argument("--n-samples", type=int, required=True)
    gen.add_argument("--tokens", type=int, default=24)
    gen.add_argument("--groups", type=int, default=6)
    gen.add_argument("--dim", type=int, default=64)
    gen.add_argument("--text-tokens", type=int, default=8)
    gen.add_argument("--noise", type=float, default=0.2)
    gen.add_argument("--marker-scale", type=float, default=0.25)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--scorer-seed", type=int, default=None)
    gen.add_argument("--out", required=True)

    label = sub.add_parser("label", help="search retention masks for every sample")
    label.add_argument("--data", required=True)
    label.add_argument("--anchors", required=True)
    label.add_argument("--out", required=True)
    label.add_argument("--scorer", choices=["planted", "pooled", "remote"], default="planted")
    label.add_argument("--scorer-seed", type=int, default=None)
    label.add_argument("--cmd", help="remote scorer launch command")
    label.add_argument("--endpoint", help="remote scorer host:port")
    label.add_argument("--serialized", action="store_true", help="remote scorer cannot take concurrent calls")
    label.add_argument("--timeout", type=float, default=DEFAULTS["remote_timeout_s"])
    label.add_argument("--q", type=int, default=DEFAULTS["population_size"])
    label.add_argument("--p", type=int, default=DEFAULTS["parent_count"])
    label.add_argument("--iters", type=int, default=DEFAULTS["iterations"])
    label.add_argument("--crossover", type=float, default=DEFAULTS["crossover_prob"])
    label.add_argument("--mutation", type=float, default=DEFAULTS["mutation_prob"])
    label.add_argument("--seed", type=int, default=None)
    label.add_argument("--workers", type=int, default=1, help="concurrent per-sample searches")
    label.add_argument("--eval-workers", type=int, default=1, help="concurrent mask evaluations per search")
    label.add_argument("--restrict", help="top_k=K | fraction=F | none")
    label.add_argument("--oracle", action="store_true", help="exhaustive search instead of evolution")
    label.add_argument("--trace", help="write per-iteration progress JSONL here")

    tr = sub.add_parser("train", help="train the retention classifier")
    tr.add_argument("--data", required=True)
    tr.add_argument("--labels", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--history", help="write per-step loss CSV here")
    tr.add_argument("--loss", default="ghm+cs", help="ghm+cs|ghm|ce+cs|ce|focal+cs")
    tr.add_argument("--alpha", type=float, default=DEFAULTS["alpha"])
    tr.add_argument("--epochs", type=int, default=DEFAULTS["epochs"])
    tr.add_argument("--lr", dest="lr0", type=float, default=DEFAULTS["lr0"])
    tr.add_argument("--batch-size", type=int, default=DEFAULTS["batch_size"])
    tr.add_argument("--d-model", type=int, help="defaults to the dataset embedding width")
    tr.add_argument("--heads", type=int, default=4)
    tr.add_argument("--mlp-ratio", type=int, default=4)
    tr.add_argument("--use-positions", action="store_true")
    tr.add_argument("--ghm-mode", choices=["unit_region", "exact"], default=DEFAULTS["ghm_mode"])
    tr.add_argument("--ghm-bins", type=int, default=DEFAULTS["ghm_bins"])
    tr.add_argument("--ghm-eps", type=float)
    tr.add_argument("--ghm-momentum", type=float, default=0.0)
    tr.add_argument("--density-scope", choices=["batch", "sample"], default="batch")
    tr.add_argument("--focal-gamma", type=float, default=2.0)
    tr.add_argument("--focal-alpha", type=float, default=0.25)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--no-text", action="store_true", help="train on an empty text stream")
    tr.add_argument("--donor", help="parameter file to copy block weights from")

    ev = sub.add_parser("eval", help="score predicted masks against labels")
    ev.add_argument("--data", required=True)
    ev.add_argument("--params", required=True)
    ev.add_argument("--labels", required=True)
    ev.add_argument("--truth", help="planted ground-truth label file")
    ev.add_argument("--r", type=int)
    ev.add_argument("--ratio", type=float)
    ev.add_argument("--baseline-seed", type=int, default=0)
    ev.add_argument("--out", required=True)

    cp = sub.add_parser("compress", help="predict retention masks with trained parameters")
    cp.add_argument("--data", required=True)
    cp.add_argument("--params", required=True)
    cp.add_argument("--r", type=int)
    cp.add_argument("--ratio", type=float)
    cp.add_argument("--out", required=True)

    rd = sub.add_parser("render", help="render a retention mask as a grid")
    rd.add_argument("--masks", required=True, help="labels.jsonl or compress output")
    rd.add_argument("--sample-id", required=True)
    rd.add_argument("--width", type=int, required=True)
    rd.add_argument("--format", choices=["text", "ppm"], default="text")
    rd.add_argument("--out", required=True)

    bn = sub.add_parser("bench", help="measure mask-evaluation throughput")
    bn.add_argument("--data", required=True)
    bn.add_argument("--anchors", required=True)
    bn.add_argument("--scorer", choices=["planted", "pooled"], default="planted")
    bn.add_argument("--scorer-seed", type=int, default=None)
    bn.add_argument("--q", type=int, default=DEFAULTS["population_size"])
    bn.add_argument("--p", type=int, default=DEFAULTS["parent_count"])
    bn.add_argument("--iters", type=int, default=DEFAULTS["iterations"])
    bn.add_argument("--seed", type=int, default=None)
    bn.add_argument("--latency-ms", type=float, default=0.0)
    bn.add_argument("--workers", default="1,2,4,8", help="comma-separated worker counts")
    bn.add_argument("--limit", type=int, help="benchmark at most this many samples")
    bn.add_argument("--out", required=True)

    gc = sub.add_parser("grad-check", help="certify analytic gradients against finite differences")
    gc.add_argument("--seed", type=int, default=None)
    gc.add_argument("--trials", type=int, default=1)
    gc.add_argument("--d-model", type=int, default=8)
    gc.add_argument("--heads", type=int, default=2)
    gc.add_argument("--tokens", type=int, default=4)
    gc.add_argument("--text-tokens", type=int, default=2)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--alpha", type=float, default=DEFAULTS["alpha"])
    gc.add_argument("--ghm-bins", type=int, default=10)
    gc.add_argument("--out")
    return parser


def _resolve_options(args: argparse.Namespace) -> tuple[dict, Path | None]:
    """Flatten parsed args into the manifest-ready options dict and pick the
    manifest location for the command's primary output."""
    seed = args.seed if getattr(args, "seed", None) is not None else _default_seed()
    cmd = args.command
    if cmd == "gen":
        if args.groups < 1:
            raise UsageError("--groups must be >= 1")
        if args.n_samples < 1:
            raise UsageError("--n-samples must be >= 1")
        opts = {
            "family": args.family, "n_samples": args.n_samples, "tokens": args.tokens,
            "groups": args.groups, "dim": args.dim, "text_tokens": args.text_tokens,
            "noise": args.noise, "marker_scale": args.marker_scale, "seed": seed,
            "scorer_seed": args.scorer_seed if args.scorer_seed is not None else seed,
            "out": args.out,
        }
        return opts, Path(args.out) / "gen.run.json"
    if cmd == "label":
        if args.scorer == "remote" and not (args.cmd or args.endpoint):
            raise UsageError("remote scorer needs --cmd or --endpoint")
        opts = {
            "data": args.data, "anchors": args.anchors, "out": args.out,
            "scorer": args.scorer,
            "scorer_seed": args.scorer_seed if args.scorer_seed is not None else seed,
            "endpoint": args.cmd or args.endpoint,
            "concurrency": "serialized" if args.serialized else "safe",
            "timeout": args.timeout,
            "population_size": args.q, "parent_count": args.p, "iterations": args.iters,
            "crossover_prob": args.crossover, "mutation_prob": args.mutation,
            "seed": seed, "workers": args.workers, "eval_workers": args.eval_workers,
            "restrict": args.restrict, "oracle": args.oracle, "trace": args.trace,
        }
        return opts, Path(args.out + ".run.json")
    if cmd == "train":
        opts = {
            "data": args.data, "labels": args.labels, "out": args.out, "history": args.history,
            "loss": args.loss, "alpha": args.alpha, "epochs": args.epochs, "lr0": args.lr0,
            "batch_size": args.batch_size, "d_model": args.d_model, "heads": args.heads,
            "mlp_ratio": args.mlp_ratio, "use_positions": args.use_positions,
            "ghm_mode": args.ghm_mode, "ghm_bins": args.ghm_bins, "ghm_eps": args.ghm_eps,
            "ghm_momentum": args.ghm_momentum, "density_scope": args.density_scope,
            "focal_gamma": args.focal_gamma, "focal_alpha": args.focal_alpha,
            "seed": seed, "no_text": args.no_text, "donor": args.donor,
        }
        return opts, Path(args.out + ".run.json")
    if cmd == "eval":
        opts = {
            "data": args.data, "params": args.params, "labels": args.labels, "truth": args.truth,
            "r": args.r, "ratio": args.ratio, "baseline_seed": args.baseline_seed, "out": args.out,
        }
        return opts, Path(args.out + ".run.json")
    if cmd == "compress":
        if args.r is None and args.ratio is None:
            raise UsageError("compress needs --r or --ratio")
        opts = {"data": args.data, "params": args.params, "r": args.r, "ratio": args.ratio, "out": args.out}
        return opts, Path(args.out + ".run.json")
    if cmd == "render":
        opts = {
            "masks": args.masks, "sample_id": args.sample_id, "width": args.width,
            "format": args.format, "out": args.out,
        }
        return opts, Path(args.out + ".run.json")
    if cmd == "bench":
        try:
            workers_list = [int(w) for w in args.workers.split(",") if w]
        except ValueError as exc:
            raise UsageError(f"--workers must be comma-separated integers: {exc}") from exc
        opts = {
            "data": args.data, "anchors": args.anchors, "scorer": args.scorer,
            "scorer_seed": args.scorer_seed if args.scorer_seed is not None else seed,
            "population_size": args.q, "parent_count": args.p, "iterations": args.iters,
            "seed": seed, "latency_ms": args.latency_ms, "workers_list": workers_list,
            "limit": args.limit, "out": args.out,
        }
        return opts, Path(args.out + ".run.json")
    if cmd == "grad-check":
        opts = {
            "seed": seed, "trials": args.trials, "d_model": args.d_model, "heads": args.heads,
            "tokens": args.tokens, "text_tokens": args.text_tokens, "h": args.h,
            "alpha": args.alpha, "ghm_bins": args.ghm_bins, "out": args.out,
        }
        return opts, Path(args.out + ".run.json") if args.out else None
    raise UsageError("no command given (see --help)")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--show-defaults" in argv:
        print(json.dumps(DEFAULTS, indent=2, sort_keys=True))
        return 0
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        opts, manifest_file = _resolve_options(args)
        _run(args.command, opts, manifest_file)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ScorerTransportError, ScorerProtocolError, RemoteScorerFailure, ScorerTimeout) as exc:
        print(f"remote scorer error: {exc}", file=sys.stderr)
        return 4
    except ScorerError as exc:
        print(f"scorer error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
