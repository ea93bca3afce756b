"""``poolleak`` command line: one subcommand per experiment.

Exit codes: 0 success, 1 usage, 2 invalid config, 3 runtime failure
(including a failed ``ct-verify``).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analyzer import (
    analyze_layer_samples,
    analyze_pairs,
    correlate_updates_time,
    median,
    median_table,
    report_json,
)
from .attack import (
    MIAExperiment,
    MLPSpec,
    build_attack_dataset,
    default_space,
    evaluate,
    grid_search,
    mlp_train,
    split_indices,
)
from .charts import render_chart, write_table
from .config import ExperimentConfig, parse_config, validate
from .data import SyntheticTask, load_directory, make_train_query, substream, substream_seed
from .engine import ModelSpec, PoolVariant, build_custom_cnn, load_model, update_counts
from .errors import DegenerateInput, ParseError, PoolLeakError, ValidationError
from .harness import (
    CollectionProtocol,
    SurrogateChannel,
    WallClockChannel,
    collection_guard,
    run_protocol,
    run_protocol_layers,
    wallclock_self_test,
    write_dump,
)
from .trainer import DPConfig, TrainConfig, train

log = logging.getLogger("poolleak")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
COMMANDS = ("analyze-pairs", "layerwise", "attack", "mia", "overlap", "compare-countermeasure", "ct-verify")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poolleak", description="Max-pool timing leakage experiments.")
    p.add_argument("--version", action="version", version=f"poolleak {__version__}")
    sub = p.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment YAML file")
        s.add_argument("--out", help="output directory (overrides out_dir)")
        s.add_argument("--seed", type=int, help="global seed (u64)")
        s.add_argument("--channel", choices=["wall", "surrogate"])
        s.add_argument("--variant", choices=["naive", "ct"])
        s.add_argument("-v", "--verbose", action="store_true")
    return p


# ------------------------------------------------------------------ context


class Experiment:
    """Resolved config plus the seeded builders every command shares."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = cfg.seed
        self.shape = tuple(cfg.model.input_shape)
        self.classes = cfg.model.class_count
        self.environment: dict | None = None

    # seeds are derived per stage so each stage can be reproduced alone
    def stage_seed(self, name: str) -> int:
        return substream_seed(self.seed, name)

    def protocol(self, M: int | None = None) -> CollectionProtocol:
        p = self.cfg.protocol
        return CollectionProtocol(p.N, p.P, M if M is not None else p.M, p.warmup)

    def channel(self):
        c = self.cfg.channel
        if c.kind == "wall":
            return WallClockChannel()
        return SurrogateChannel(c.ns_per_update, c.base_ns, c.noise_std_ns, self.stage_seed("noise"))

    def train_config(self) -> TrainConfig:
        t = self.cfg.train
        return TrainConfig(t.learning_rate, t.epochs, t.batch_size, self.stage_seed("shuffle"))

    def dp_config(self) -> DPConfig:
        d = self.cfg.dp
        return DPConfig(d.enabled, d.clip_norm, d.noise_multiplier, d.epsilon_label)

    def train_query(self):
        d = self.cfg.dataset
        if d.source == "directory":
            root = Path(d.path)
            return (load_directory(root / "train", self.classes), load_directory(root / "query", self.classes))
        return make_train_query(d.train_per_class, d.query_per_class, self.classes, self.shape, self.seed, d.noise)

    def pool(self):
        d = self.cfg.dataset
        if d.source == "directory":
            return load_directory(d.path, self.classes)
        task = SyntheticTask(self.classes, self.shape, self.seed, d.noise)
        return task.sample(d.per_class, substream(self.seed, "data-gen/pool"))

    def model(self, variant: PoolVariant | None = None) -> ModelSpec:
        if not hasattr(self, "_model"):
            m = self.cfg.model
            if m.source == "load":
                model = load_model(m.path)
            else:
                model = build_custom_cnn(self.shape, self.classes, self.stage_seed("model-init"))
                if m.train:
                    t, _ = self.train_query()
                    model = train(model, t, self.train_config(), self.dp_config()).model
            if m.avg_pools:
                model = model.with_avg_pools()
            self._model = model
        return self._model.with_pool_variant(variant or self.cfg.variant)

    @contextlib.contextmanager
    def collecting(self):
        """Exclusive regime for wall-clock runs, with the jitter self-test."""
        if self.cfg.channel.kind != "wall":
            yield
            return
        with collection_guard():
            st = wallclock_self_test(self.cfg.self_test.samples, self.cfg.self_test.jitter_budget_ns)
            self.environment = {"NOISY": st.noisy, "self_test": st.to_dict()}
            if st.noisy:
                log.warning("timing environment flagged NOISY (p95-p5 = %.0f ns)", st.p95_ns - st.p5_ns)
            yield

    def write_report(self, name: str, results: dict) -> Path:
        config = self.cfg.to_dict()
        config.pop("out_dir")
        payload = {"command": self.command, "version": __version__, "config": config, "results": results}
        if self.environment is not None:
            payload["environment"] = self.environment
        path = self.out / name
        path.write_text(report_json(payload))
        return path

    def chart(self, kind: str, stem: str, header, rows, title: str) -> None:
        data = self.out / f"{stem}.csv"
        write_table(data, header, rows)
        render_chart(kind, data, self.out / f"{stem}.svg", title)


# ----------------------------------------------------------------- commands


def _class_counts(model: ModelSpec, groups, P: int) -> list[float]:
    # lower median, like the timing side, so a noiseless channel agrees exactly
    return [median([sum(update_counts(model, x)) for x in groups[c][:P]]) for c in sorted(groups)]


def _pairs_for(ctx: Experiment, variant: PoolVariant) -> tuple[dict, object]:
    model = ctx.model(variant)
    groups = ctx.pool().by_class()
    proto = ctx.protocol()
    with ctx.collecting():
        dists = run_protocol(model, groups, proto, ctx.channel())
    report = analyze_pairs(dists, {"protocol": proto.to_dict(), "variant": variant.value})
    classes, _, table = median_table(dists)
    counts = _class_counts(model, groups, proto.P)
    try:
        consistency, rho = correlate_updates_time(counts, [median(row) for row in table])
        corr = {"consistency_fraction": consistency, "spearman_rho": rho}
    except DegenerateInput:
        corr = None  # equal counts everywhere, e.g. the constant-time kernel
    result = report.to_dict()
    result["fraction"] = report.fraction
    result["median_update_counts"] = counts
    result["correlation"] = corr
    return result, dists


def cmd_analyze_pairs(ctx: Experiment) -> int:
    result, dists = _pairs_for(ctx, ctx.cfg.variant)
    write_dump(dists, ctx.out / "dump.csv")
    ctx.write_report("report.json", result)
    d, total = result["distinguishable_count"], result["total_pairs"]
    ctx.chart("bar", "pair_counts", ["label", "value"],
              [["Distinguishable", d], ["Indistinguishable", total - d]], "Class pairs by verdict")
    print(f"{d}/{total} pairs distinguishable")
    return EXIT_OK


def cmd_layerwise(ctx: Experiment) -> int:
    model = ctx.model()
    proto = ctx.protocol()
    with ctx.collecting():
        samples = run_protocol_layers(model, ctx.pool().by_class(), proto, ctx.channel())
    report = analyze_layer_samples(model.layer_names, samples, {"protocol": proto.to_dict()})
    ctx.write_report("layerwise.json", report.to_dict())
    ctx.chart("bar", "layer_counts", ["layer", "distinguishable"],
              list(zip(model.layer_names, report.counts)), "Distinguishable pairs per layer")
    for name, count in zip(model.layer_names, report.counts):
        print(f"{name:>14} {count}/{report.total_pairs}")
    return EXIT_OK


def _space(ctx: Experiment) -> list[MLPSpec]:
    a = ctx.cfg.attack
    seed = ctx.stage_seed("mlp")
    if a.grid == "single":
        return [MLPSpec((64, 32), "relu", 0.01, a.epochs, seed)]
    return default_space(a.epochs, seed)


def cmd_attack(ctx: Experiment) -> int:
    a = ctx.cfg.attack
    p = ctx.cfg.protocol
    model = ctx.model()
    groups = ctx.pool().by_class()
    M = a.M or p.M
    with ctx.collecting():
        ds = build_attack_dataset(model, groups, p.P, p.N, M, ctx.channel(),
                                  substream(ctx.seed, "attack-draw"), p.warmup)
    ds.save(ctx.out / "attack_dataset.csv")
    tr, te = split_indices(ds.labels, a.train_fraction, ctx.stage_seed("split"))
    best, scores = grid_search(ds.subset(tr), _space(ctx), a.K, ctx.stage_seed("kfold"))
    net = mlp_train(ds.subset(tr), best)
    acc, cm = evaluate(net, ds.subset(te))
    ctx.write_report("attack.json", {
        "accuracy": acc,
        "chance": 1.0 / len(groups),
        "confusion": cm.to_dict(),
        "best_spec": best.to_dict(),
        "grid_scores": scores,
        "rows": len(ds),
        "test_rows": int(te.size),
    })
    labels = [str(c) for c in cm.classes]
    ctx.chart("heat", "confusion", ["true\\pred", *labels],
              [[lab, *row] for lab, row in zip(labels, cm.counts.tolist())], "Confusion matrix (test rows)")
    print(f"attack accuracy {acc:.4f} (chance {1.0 / len(groups):.2f})")
    return EXIT_OK


def _mia(ctx: Experiment) -> MIAExperiment:
    t, q = ctx.train_query()
    a = ctx.cfg.attack
    return MIAExperiment(
        t, q, ctx.train_config(), ctx.dp_config(), ctx.protocol(a.M or ctx.cfg.protocol.M), ctx.channel(),
        seed=ctx.seed, variant=ctx.cfg.variant, space=_space(ctx), K=a.K, train_fraction=a.train_fraction,
        retrain_mode=ctx.cfg.mia.retrain_mode, model2_init=ctx.cfg.mia.model2_init,
    )


def cmd_mia(ctx: Experiment) -> int:
    with ctx.collecting():
        res = _mia(ctx).run()
    ctx.write_report("mia.json", res.to_dict())
    ctx.chart("bar", "mia", ["set", "accuracy"], [["S1", res.acc_S1], ["S2", res.acc_S2]], "Label classifier accuracy")
    print(f"S1 {res.acc_S1:.4f}  S2 {res.acc_S2:.4f}  gap {res.gap:.4f}")
    return EXIT_OK


def cmd_overlap(ctx: Experiment) -> int:
    with ctx.collecting():
        res = _mia(ctx).sweep(ctx.cfg.mia.ratios)
    ctx.write_report("overlap.json", res.to_dict())
    ctx.chart("line", "overlap", ["ratio", "accuracy"], list(zip(res.ratios, res.accuracies)),
              "Accuracy vs share of Q added to training")
    for r, acc in zip(res.ratios, res.accuracies):
        print(f"ratio {r:.2f} accuracy {acc:.4f} (baseline {res.baseline:.4f})")
    return EXIT_OK


def cmd_compare_countermeasure(ctx: Experiment) -> int:
    naive, _ = _pairs_for(ctx, PoolVariant.NAIVE)
    ct, _ = _pairs_for(ctx, PoolVariant.CONSTANT_TIME)
    n, c = naive["distinguishable_count"], ct["distinguishable_count"]
    ctx.write_report("compare.json", {"naive": naive, "ct": ct, "naive_exceeds_ct": n > c})
    ctx.chart("bar", "compare", ["variant", "distinguishable"], [["naive", n], ["ct", c]],
              "Distinguishable pairs before and after the countermeasure")
    print(f"naive {n}/{naive['total_pairs']}  ct {c}/{ct['total_pairs']}")
    return EXIT_OK


def cmd_ct_verify(ctx: Experiment) -> int:
    ct_model = ctx.model(PoolVariant.CONSTANT_TIME)
    naive_model = ctx.model(PoolVariant.NAIVE)
    rng = substream(ctx.seed, "data-gen/ct-verify")
    ct_counts, naive_counts = set(), set()
    for _ in range(ctx.cfg.ct_verify.inputs):
        x = rng.standard_normal(ctx.shape).astype(np.float32)
        ct_counts.add(tuple(update_counts(ct_model, x)))
        naive_counts.add(sum(update_counts(naive_model, x)))
    expected = _ct_expected(ct_model)
    ok = ct_counts == {expected}
    ctx.write_report("ct_verify.json", {
        "inputs": ctx.cfg.ct_verify.inputs,
        "ct_distinct_counts": [list(c) for c in sorted(ct_counts)],
        "expected_per_layer": list(expected),
        "naive_distinct_totals": len(naive_counts),
        "constant": ok,
    })
    ctx.chart("bar", "ct_verify", ["variant", "distinct_counts"],
              [["ct", len(ct_counts)], ["naive", len(naive_counts)]], "Distinct update counts over random inputs")
    print(("PASS" if ok else "FAIL") + f": {len(ct_counts)} distinct constant-time count vector(s)")
    return EXIT_OK if ok else EXIT_RUNTIME


def _ct_expected(model: ModelSpec) -> tuple[int, ...]:
    from .engine import MaxPool, infer_shapes

    shapes = infer_shapes(model.layers, model.input_shape)
    out = []
    for layer, shape_out in zip(model.layers, shapes):
        if isinstance(layer, MaxPool):
            kh, kw = layer.kernel
            out.append(int(np.prod(shape_out)) * kh * kw)
    return tuple(out)


HANDLERS = {
    "analyze-pairs": cmd_analyze_pairs,
    "layerwise": cmd_layerwise,
    "attack": cmd_attack,
    "mia": cmd_mia,
    "overlap": cmd_overlap,
    "compare-countermeasure": cmd_compare_countermeasure,
    "ct-verify": cmd_ct_verify,
}


def load_experiment(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.channel is not None:
        cfg.channel.kind = args.channel
    if args.variant is not None:
        cfg.pool_variant = args.variant
    if args.out is not None:
        cfg.out_dir = args.out
    elif not Path(cfg.out_dir).is_absolute():
        cfg.out_dir = str(Path(args.config).parent / cfg.out_dir)
    return validate(cfg, Path(args.config).parent)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"poolleak: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_experiment(args)
    except ParseError as exc:
        print(f"poolleak: config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as exc:
        print(f"poolleak: invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return HANDLERS[args.command](Experiment(cfg, args.command))
    except (PoolLeakError, ValueError, OSError, RuntimeError) as exc:
        print(f"poolleak: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is still a runtime failure, not a usage one
        log.debug("unexpected error", exc_info=True)
        print(f"poolleak: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
