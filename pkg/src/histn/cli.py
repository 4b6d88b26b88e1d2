"""Command-line interface.

Commands: ``verify`` (built-in oracle checks, no data needed),
``synth`` (write the synthetic corpus), ``train`` (fit one model to a
dataset), ``eval`` (score a checkpoint), ``benchmark`` (run a protocol
over classifier variants and compare them), and ``export-features``
(dump the pooled per-window features as CSV).

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure (data, numerics, protocol), 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import (
    DatasetManifest,
    SynthSpec,
    balanced_batch,
    baseline_normalize,
    load_dataset,
    load_manifest,
    segments_to_batch,
    synth_generate,
)
from .errors import (
    ContractError,
    DataError,
    HistnError,
    LabelError,
    MetricError,
    NumericError,
    ParameterError,
    ProtocolError,
    ValidationError,
)
from .graph import build_prior_graph
from .metrics import EvalReport, paired_t_test
from .model import (
    ModelConfig,
    build_model,
    config_to_dict,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    ProtocolConfig,
    run_loocv,
    run_subject_dependent_cv,
    train,
)
from .verify import run_all

_CONFIG_ERRORS = (ValidationError, ParameterError, LabelError, ContractError)
_RUNTIME_ERRORS = (DataError, NumericError, ProtocolError, MetricError)


def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as err:
        raise ValidationError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    unknown = set(doc.keys()) - {"model", "protocol"}
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)}")
    return doc


_MODEL_KEYS = {
    "variant", "num_views", "head_kernel", "head_pool", "sep_kernel",
    "num_classes", "dropout_rate", "activation", "smoothing_s",
    "input_samples", "graph",
}


def _model_config_from(doc: Mapping, manifest: DatasetManifest, window_seconds: float) -> ModelConfig:
    unknown = set(doc.keys()) - _MODEL_KEYS
    if unknown:
        raise ValidationError(f"unknown model config keys {sorted(unknown)}")
    graph_spec = doc.get("graph", "G0")
    hierarchy = build_prior_graph(graph_spec, channels=manifest.channels)
    derived_samples = int(round(window_seconds * manifest.sample_rate_hz))
    samples = int(doc.get("input_samples", derived_samples))
    if samples != derived_samples:
        raise ValidationError(
            f"input_samples {samples} contradicts window of {window_seconds} s at "
            f"{manifest.sample_rate_hz} Hz ({derived_samples} samples)"
        )
    return ModelConfig(
        hierarchy=hierarchy,
        variant=doc.get("variant", "D"),
        num_views=int(doc.get("num_views", 4)),
        head_kernel=int(doc.get("head_kernel", 5)),
        head_pool=int(doc.get("head_pool", 2)),
        sep_kernel=int(doc.get("sep_kernel", 5)),
        num_classes=int(doc.get("num_classes", 5)),
        dropout_rate=float(doc.get("dropout_rate", 0.25)),
        activation=doc.get("activation", "elu"),
        smoothing_s=float(doc.get("smoothing_s", 0.5)),
        input_samples=samples,
    )


def _protocol_config_from(doc: Mapping, args: argparse.Namespace) -> ProtocolConfig:
    data = dict(doc)
    for flag, key in (
        ("seed", "seed"),
        ("dimension", "dimension"),
        ("epochs", "epochs"),
        ("n_folds", "n_folds"),
        ("steps_per_epoch", "steps_per_epoch"),
        ("protocol", "protocol"),
        ("test_draws", "test_draws"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if getattr(args, "folds", None) is not None:
        data["folds"] = [int(f) for f in args.folds.split(",") if f != ""]
    return ProtocolConfig.from_dict(data)


def _fit_batch(proto: ProtocolConfig, doc: Mapping, n_labels: int) -> ProtocolConfig:
    """Round implicit batch sizes down to a multiple of the labels present.

    Explicitly configured values pass through untouched so the balanced
    sampler can still reject indivisible requests.
    """
    fields = {}
    for key in ("batch_size", "stage1_batch_size", "stage2_batch_size"):
        current = getattr(proto, key)
        if key in doc or current % n_labels == 0:
            continue
        fields[key] = max(n_labels, current // n_labels * n_labels)
    if not fields:
        return proto
    noted = ", ".join(f"{key} {getattr(proto, key)} -> {value}" for key, value in fields.items())
    print(f"note: fitting batches to {n_labels} labels: {noted}", file=sys.stderr)
    return replace(proto, **fields)


def _check_channels(manifest: DatasetManifest, cfg: ModelConfig) -> None:
    if tuple(manifest.channels) != cfg.hierarchy.channel.node_names:
        raise ValidationError(
            "manifest channels do not match the model's channel nodes: "
            f"{list(manifest.channels)} vs {list(cfg.hierarchy.channel.node_names)}"
        )


def _float_cell(value) -> str:
    return repr(float(value)) if value is not None and value != "" else ""


# ---------------------------------------------------------------------------
# commands


def cmd_verify(args: argparse.Namespace) -> int:
    report = run_all()
    for check in report["checks"]:
        status = "pass" if check["passed"] else "FAIL"
        print(f"[{status}] {check['group']}/{check['name']}: {check['detail']}")
    print(f"verify: {'all checks passed' if report['passed'] else 'CHECKS FAILED'} "
          f"in {report['elapsed_seconds']} s")
    if args.report:
        _write_text_atomic(Path(args.report), json.dumps(report, indent=1))
    return 0 if report["passed"] else 3


def cmd_synth(args: argparse.Namespace) -> int:
    doc = {}
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text())
        except FileNotFoundError:
            raise ValidationError(f"spec file {args.spec} does not exist") from None
        except json.JSONDecodeError as err:
            raise ValidationError(f"spec file {args.spec} is not valid JSON: {err}") from None
    spec = SynthSpec.from_dict(doc)
    overrides = {}
    for flag in ("seed", "subjects", "trials_per_subject", "noise_std"):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = value
    if overrides:
        spec = replace(spec, **overrides)
    manifest_path = synth_generate(spec, args.out)
    print(f"wrote {spec.subjects * spec.trials_per_subject} trials to {manifest_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run_cfg = _load_run_config(args.config)
    manifest = load_manifest(args.data)
    proto = _protocol_config_from(run_cfg.get("protocol", {}), args)
    model_doc = dict(run_cfg.get("model", {}))
    if args.variant:
        model_doc["variant"] = args.variant
    model_cfg = _model_config_from(model_doc, manifest, proto.window_seconds)
    _check_channels(manifest, model_cfg)
    trials = [baseline_normalize(t) for t in load_dataset(args.data)]
    labels = sorted({t.labels[proto.dimension] for t in trials if proto.dimension in t.labels})
    if not labels:
        raise ProtocolError(f"no trial carries a {proto.dimension!r} label")
    proto = _fit_batch(proto, run_cfg.get("protocol", {}), len(labels))

    root = np.random.SeedSequence([proto.seed, 301])
    init_ss, train_ss, val_ss = root.spawn(3)
    model = build_model(model_cfg, np.random.default_rng(init_ss))
    val_size = max(len(labels), (proto.val_draws // len(labels)) * len(labels))
    val_segments = balanced_batch(
        trials, val_size, proto.window_seconds, np.random.default_rng(val_ss), proto.dimension
    )
    val_data = segments_to_batch(val_segments)

    def sampler(batch_size: int, rng: np.random.Generator):
        return segments_to_batch(
            balanced_batch(trials, batch_size, proto.window_seconds, rng, proto.dimension)
        )

    total_seconds = sum(t.seconds for t in trials)
    steps = proto.steps_per_epoch or max(
        1, int(np.ceil(total_seconds * manifest.sample_rate_hz / proto.batch_size))
    )
    record = train(
        model, sampler, val_data,
        epochs=proto.epochs, steps_per_epoch=steps,
        batch_size=proto.batch_size, lr=proto.lr,
        rng=np.random.default_rng(train_ss),
    )
    save_checkpoint(model, args.out)
    summary = {
        "checkpoint": str(args.out),
        "run": record.to_dict(),
        "config": {"model": config_to_dict(model_cfg), "protocol": proto.to_dict()},
    }
    if args.report:
        _write_text_atomic(Path(args.report), json.dumps(summary, indent=1))
    best = record.best_val_loss
    print(f"saved checkpoint to {args.out} (best val loss {best if best is None else round(best, 6)})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    _check_channels(manifest, model.config)
    trials = [baseline_normalize(t) for t in load_dataset(args.data)]
    labels = sorted({t.labels[args.dimension] for t in trials if args.dimension in t.labels})
    if not labels:
        raise ProtocolError(f"no trial carries a {args.dimension!r} label")
    window_seconds = model.config.input_samples / manifest.sample_rate_hz
    draws = max(len(labels), (args.draws // len(labels)) * len(labels))
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 302]))
    segments = balanced_batch(trials, draws, window_seconds, rng, args.dimension)
    x, y = segments_to_batch(segments)
    rankings = model.predict_ranking(model.forward(x, training=False))
    report = EvalReport.from_rankings(rankings, y, model.config.num_classes)
    text = json.dumps(report.to_dict(), indent=1)
    if args.report:
        _write_text_atomic(Path(args.report), text)
    print(text)
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    run_cfg = _load_run_config(args.config)
    manifest = load_manifest(args.data)
    proto = _protocol_config_from(run_cfg.get("protocol", {}), args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ValidationError("no variants requested")
    base_model_doc = dict(run_cfg.get("model", {}))
    trials = load_dataset(args.data)
    labels = sorted({t.labels[proto.dimension] for t in trials if proto.dimension in t.labels})
    if not labels:
        raise ProtocolError(f"no trial carries a {proto.dimension!r} label")
    proto = _fit_batch(proto, run_cfg.get("protocol", {}), len(labels))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = {}
    params = {}
    for variant in variants:
        model_doc = dict(base_model_doc)
        model_doc["variant"] = variant
        model_cfg = _model_config_from(model_doc, manifest, proto.window_seconds)
        _check_channels(manifest, model_cfg)
        params[variant] = count_parameters(build_model(model_cfg, np.random.default_rng(0)))
        if proto.protocol == "subject_dependent_cv":
            result = run_subject_dependent_cv(trials, model_cfg, proto)
        else:
            result = run_loocv(trials, model_cfg, proto)
        results[variant] = result
        _write_text_atomic(out_dir / f"variant_{variant}.json", json.dumps(result.to_dict(), indent=1))
        agg = result.aggregate
        print(
            f"variant {variant}: F1 {agg['f1_macro']['mean']:.2f}±{agg['f1_macro']['std']:.2f} "
            f"Seq2HR {agg['seq2hr']['mean']:.2f}±{agg['seq2hr']['std']:.2f} "
            f"({params[variant]} parameters)"
        )

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["variant", "params", "f1_macro_mean", "f1_macro_std", "top2_mean", "top2_std",
         "tri_p_mean", "tri_p_std", "seq2hr_mean", "seq2hr_std", "seq2hr_p_vs_A"]
    )
    base_seq = None
    if "A" in results:
        base_seq = [u["report"]["seq2hr"] for u in results["A"].units]
    for variant in variants:
        agg = results[variant].aggregate
        p_cell = ""
        if base_seq is not None and variant != "A" and len(base_seq) >= 2:
            seq = [u["report"]["seq2hr"] for u in results[variant].units]
            try:
                _, p = paired_t_test(seq, base_seq)
                p_cell = repr(p)
            except MetricError:
                p_cell = "degenerate"
        writer.writerow(
            [variant, params[variant]]
            + [_float_cell(agg[m][k]) for m in ("f1_macro", "top2_accuracy", "tri_p", "seq2hr") for k in ("mean", "std")]
            + [p_cell]
        )
    _write_text_atomic(out_dir / "comparison.csv", buffer.getvalue())
    print(f"wrote {out_dir / 'comparison.csv'}")
    return 0


def cmd_export_features(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    _check_channels(manifest, model.config)
    trials = [baseline_normalize(t) for t in load_dataset(args.data)]
    width = model.config.input_samples
    h = model.config.hierarchy
    names = list(h.channel.node_names) + list(h.region.node_names) + list(h.global_level.node_names)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["subject", "trial", "window", "label_valence", "label_arousal"] + [f"feat_{n}" for n in names]
    )
    for trial in trials:
        total = trial.signal.shape[1]
        starts = list(range(0, total - width + 1, width))
        if not starts:
            raise DataError(
                f"subject {trial.subject_id} trial {trial.trial_id} is shorter than one window"
            )
        windows = np.stack([trial.signal[:, s : s + width].T for s in starts])
        _, features = model.forward_with_features(windows, training=False)
        for row_idx, start in enumerate(starts):
            writer.writerow(
                [
                    trial.subject_id,
                    trial.trial_id,
                    start // width,
                    trial.labels.get("valence", ""),
                    trial.labels.get("arousal", ""),
                ]
                + [repr(float(v)) for v in features.data[row_idx]]
            )
    _write_text_atomic(Path(args.out), buffer.getvalue())
    print(f"wrote features for {len(trials)} trials to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histn",
        description="Hierarchical spatial-temporal network for ordinal emotion-score EEG classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the built-in oracle self checks")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("synth", help="generate the synthetic ordinal corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="JSON file of generator settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--subjects", type=int, default=None)
    p.add_argument("--trials-per-subject", dest="trials_per_subject", type=int, default=None)
    p.add_argument("--noise-std", dest="noise_std", type=float, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train one model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--config", help="run config JSON (model/protocol sections)")
    p.add_argument("--report", help="write the run summary JSON here")
    p.add_argument("--variant", choices=("A", "B", "C", "D"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dimension", choices=("valence", "arousal"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="write the report JSON here")
    p.add_argument("--dimension", choices=("valence", "arousal"), default="valence")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("benchmark", help="run a protocol over classifier variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="run config JSON (model/protocol sections)")
    p.add_argument("--variants", default="A,B,C,D", help="comma-separated subset of A,B,C,D")
    p.add_argument("--protocol", choices=("subject_dependent_cv", "loocv_two_stage"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dimension", choices=("valence", "arousal"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-folds", dest="n_folds", type=int, default=None)
    p.add_argument("--folds", help="comma-separated fold indices to run")
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int, default=None)
    p.add_argument("--test-draws", dest="test_draws", type=int, default=None)
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("export-features", help="write pooled per-window features as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_features)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _CONFIG_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except HistnError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
