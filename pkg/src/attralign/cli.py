"""Command-line entry point wiring every module together.

Subcommands: gen-synth, inspect, mine, train, ablate, probe, diag, eval,
export, attribgen. Configuration comes from flags plus an optional JSON
config file (flags win). Every command that writes output also emits a
run manifest with the resolved config, input digests, output digests, and
seed; outputs are byte-reproducible from the manifest except the explicitly
volatile timing sidecar.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import attribgen as ag
from . import dataset as ds_mod
from . import diagnostics as diag_mod
from . import mining as mine_mod
from . import model as model_mod
from . import training as train_mod
from .errors import ArtifactError, InvalidConfig

DEFAULT_SEED = 7


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _digest_tree(path: Path) -> dict[str, str]:
    path = Path(path)
    if path.is_file():
        return {str(path): _sha256_file(path)}
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file():
            out[str(p)] = _sha256_file(p)
    return out


def _write_manifest(command: str, config: dict, inputs: list, outputs: list,
                    seed: int, manifest_path: Path, volatile: list | None = None,
                    started: float | None = None) -> None:
    manifest = {
        "kind": "run-manifest",
        "artifact_version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: v for p in inputs for k, v in _digest_tree(Path(p)).items()},
        "outputs": {k: v for p in outputs for k, v in _digest_tree(Path(p)).items()},
        "volatile_outputs": [str(p) for p in (volatile or [])],
        "started_unix": started,
        "finished_unix": time.time(),
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_config_file(args: argparse.Namespace) -> dict:
    if getattr(args, "config", None):
        return json.loads(Path(args.config).read_text())
    return {}


def _resolve(args: argparse.Namespace, key: str, file_cfg: dict, default):
    """Flag value if given, else config-file value, else the default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in file_cfg:
        return file_cfg[key]
    return default


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_gen_synth(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args)
    cfg = ds_mod.SynthConfig(
        num_classes=_resolve(args, "classes", file_cfg, 10),
        samples_per_class=_resolve(args, "per-class", file_cfg, 50),
        dim_object=_resolve(args, "dim-object", file_cfg, 32),
        dim_text=_resolve(args, "dim-text", file_cfg, 32),
        inter_class_spread=_resolve(args, "spread", file_cfg, 1.0),
        intra_class_sigma=_resolve(args, "sigma", file_cfg, 0.1),
        modality_gap_offset=_resolve(args, "offset", file_cfg, 0.0),
        attribute_noise_sigma=_resolve(args, "attr-noise", file_cfg, 0.0),
        seed=_resolve(args, "seed", file_cfg, DEFAULT_SEED),
    )
    dataset = ds_mod.generate_synthetic(cfg)
    out = Path(args.output)
    ds_mod.save(dataset, out)
    _write_manifest("gen-synth", cfg.as_dict(), [], [out], cfg.seed,
                    out / "run_manifest.json", started=started)
    print(f"wrote {len(dataset)} samples, {dataset.num_categories} categories to {out}")
    return 0


def _cmd_inspect(args) -> int:
    dataset = ds_mod.load(args.dataset)
    train_n = dataset.indices(ds_mod.Split.TRAIN).size
    test_n = dataset.indices(ds_mod.Split.TEST).size
    print(f"dataset: {args.dataset}")
    print(f"super-category: {dataset.table.super_category}")
    print(f"categories: {dataset.num_categories}")
    print(f"samples: {len(dataset)} (train {train_n}, test {test_n})")
    print(f"dims: object {dataset.embedding_dim_object}, text {dataset.embedding_dim_text}")
    print(f"pooling: {dataset.pooling.value}")
    if dataset.embedding_dim_object == dataset.embedding_dim_text:
        print(f"raw object-category alignment: {diag_mod.raw_alignment_quality(dataset):.4f}")
    return 0


def _cmd_mine(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args)
    k = _resolve(args, "k", file_cfg, 3)
    dataset = ds_mod.load(args.dataset)
    hn = mine_mod.mine(dataset, k=k)
    if hn.is_clamped():
        print(f"warning: fewer than k={k} incorrect categories; sets were clamped",
              file=sys.stderr)
    out = Path(args.output)
    mine_mod.save_negatives(hn, out)
    _write_manifest("mine", {"k": k, "dataset": str(args.dataset)},
                    [args.dataset], [out], DEFAULT_SEED,
                    out.with_name(out.name + ".manifest.json"), started=started)
    print(f"mined {len(hn)} samples -> {out}")
    return 0


def _train_config_from_args(args, file_cfg: dict) -> train_mod.TrainConfig:
    stage1 = train_mod.StageConfig(
        batch_size=_resolve(args, "stage1-batch", file_cfg, 64),
        epochs=_resolve(args, "stage1-epochs", file_cfg, 1),
        lr=_resolve(args, "stage1-lr", file_cfg, 2e-4),
        warmup_steps=_resolve(args, "stage1-warmup", file_cfg, 60),
        temperature=_resolve(args, "temperature", file_cfg, 1.0),
    )
    stage2 = train_mod.StageConfig(
        batch_size=_resolve(args, "stage2-batch", file_cfg, 128),
        epochs=_resolve(args, "stage2-epochs", file_cfg, 1),
        lr=_resolve(args, "stage2-lr", file_cfg, 2e-4),
        warmup_steps=_resolve(args, "stage2-warmup", file_cfg, 60),
    )
    return train_mod.TrainConfig(
        stage1=stage1,
        stage2=stage2,
        k_hard_negatives=_resolve(args, "k", file_cfg, 3),
        mode=train_mod.TrainMode(_resolve(args, "mode", file_cfg, "two-stage")),
        contrast=train_mod.ContrastMode(_resolve(args, "contrast", file_cfg, "triple")),
        micro_batch=_resolve(args, "micro-batch", file_cfg, 16),
        one_stage_weight=_resolve(args, "one-stage-weight", file_cfg, 1.0),
        seed=_resolve(args, "seed", file_cfg, DEFAULT_SEED),
    )


def _cmd_train(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args)
    cfg = _train_config_from_args(args, file_cfg)
    dataset = ds_mod.load(args.dataset)

    inputs = [args.dataset]
    if args.negatives:
        hn = mine_mod.load_negatives(args.negatives)
        inputs.append(args.negatives)
    else:
        hn = mine_mod.mine(dataset, k=cfg.k_hard_negatives)

    model = model_mod.ProjectionModel.create(
        dataset.embedding_dim_object, dataset.embedding_dim_text,
        dim_shared=_resolve(args, "dim-shared", file_cfg, 64), seed=cfg.seed)
    record = train_mod.train(dataset, hn, model, cfg, probe=args.probe)

    out = Path(args.out)
    record_path, timing_path = record.save(out)
    model_mod.save_checkpoint(model, out / "checkpoint", step=len(record.history),
                              seed=cfg.seed)
    if record.final_metrics is not None:
        record.final_metrics.save(out / "metrics")
    _write_manifest("train", cfg.as_dict(), inputs,
                    [record_path, out / "checkpoint", out / "metrics"],
                    cfg.seed, out / "run_manifest.json",
                    volatile=[timing_path], started=started)
    if record.final_metrics is not None:
        m = record.final_metrics
        print(f"final: mc_accuracy={m.mc_accuracy:.4f} alignment={m.alignment_quality:.4f}")
    print(f"run record -> {record_path}")
    return 0


def _cmd_ablate(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args)
    cfg = _train_config_from_args(args, file_cfg)
    dataset = ds_mod.load(args.dataset)
    n_seeds = _resolve(args, "seeds", file_cfg, 5)
    seeds = [cfg.seed + i for i in range(n_seeds)]
    report = train_mod.ablation_suite(dataset, cfg, seeds=seeds,
                                      dim_shared=_resolve(args, "dim-shared", file_cfg, 64))
    out = Path(args.out)
    report_path = report.save(out)
    _write_manifest("ablate", {**cfg.as_dict(), "seeds": seeds}, [args.dataset],
                    [report_path, out / "ablation.txt"], cfg.seed,
                    out / "run_manifest.json", started=started)
    print(report.to_text())
    return 0


def _load_model(args, dataset) -> model_mod.ProjectionModel:
    if args.model:
        model, _, _ = model_mod.load_checkpoint(args.model)
        return model
    return model_mod.ProjectionModel.create(
        dataset.embedding_dim_object, dataset.embedding_dim_text,
        seed=getattr(args, "seed", None) or DEFAULT_SEED)


def _cmd_probe(args) -> int:
    dataset = ds_mod.load(args.dataset)
    train = dataset.subset(ds_mod.Split.TRAIN)
    test = dataset.subset(ds_mod.Split.TEST)
    if args.source == "raw":
        tr, te = train.object_matrix, test.object_matrix
    else:
        model = _load_model(args, dataset)
        tr = model_mod.project(model, "object", train.object_matrix)
        te = model_mod.project(model, "object", test.object_matrix)
    acc = diag_mod.linear_probe(tr, train.labels, te, test.labels,
                                epochs=args.epochs, lr=args.lr)
    print(f"probe accuracy ({args.source} object features): {acc:.4f}")
    return 0


def _cmd_diag(args) -> int:
    started = time.time()
    dataset = ds_mod.load(args.dataset)
    model = _load_model(args, dataset)
    report = diag_mod.compute_metrics(dataset, model, choices="all",
                                      seed=args.seed or DEFAULT_SEED, probe=True)
    out = Path(args.out)
    paths = report.save(out)
    inputs = [args.dataset] + ([args.model] if args.model else [])
    _write_manifest("diag", {"dataset": str(args.dataset), "model": args.model},
                    inputs, paths, args.seed or DEFAULT_SEED,
                    out / "run_manifest.json", started=started)
    print(f"alignment={report.alignment_quality:.4f} mc={report.mc_accuracy:.4f}")
    return 0


def _cmd_eval(args) -> int:
    dataset = ds_mod.load(args.dataset)
    model = _load_model(args, dataset)
    choices = "all" if args.choices == "all" else int(args.choices)
    result = diag_mod.evaluate_mc(dataset, model, choices=choices,
                                  seed=args.seed or DEFAULT_SEED)
    print(f"mc accuracy ({args.choices} choices): {result.accuracy:.4f}")
    for note in result.notes:
        print(f"note: {note}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(" ".join(str(int(v)) for v in row)
                                 for row in result.confusion) + "\n")
        _write_manifest("eval", {"choices": args.choices}, [args.dataset], [out],
                        args.seed or DEFAULT_SEED,
                        out.with_name(out.name + ".manifest.json"),
                        started=time.time())
    return 0


def _cmd_export(args) -> int:
    started = time.time()
    dataset = ds_mod.load(args.dataset)
    if args.space == "object":
        X, labels = dataset.object_matrix, dataset.labels
    elif args.space == "attribute":
        X, labels = dataset.attribute_matrix, dataset.labels
    else:
        X = dataset.table.name_matrix
        labels = np.arange(dataset.num_categories)
    if args.model:
        model, _, _ = model_mod.load_checkpoint(args.model)
        kind = "category" if args.space == "category" else args.space
        X = model_mod.project(model, kind, X)
    export = diag_mod.export_projection(X, labels, method=args.method)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export.save(out)
    if export.degenerate:
        print("warning: covariance rank below 2, exported raw vectors", file=sys.stderr)
    inputs = [args.dataset] + ([args.model] if args.model else [])
    _write_manifest("export", {"space": args.space, "method": args.method},
                    inputs, [out], DEFAULT_SEED,
                    out.with_name(out.name + ".manifest.json"), started=started)
    print(f"exported {export.coordinates.shape[0]} points ({export.method.value}) -> {out}")
    return 0


def _make_endpoint(args) -> ag.Endpoint:
    if args.endpoint:
        config = ag.EndpointConfig.from_dict(json.loads(Path(args.endpoint).read_text()))
    else:
        config = ag.EndpointConfig()
    if args.transport == "transcript":
        if not args.transcript:
            raise InvalidConfig("--transport transcript requires --transcript FILE")
        transport = ag.TranscriptTransport.from_file(args.transcript)
    else:
        transport = ag.HttpTransport()
    cache = ag.ResponseCache(args.cache) if args.cache else None
    return ag.Endpoint(transport, config, cache=cache)


def _cmd_attribgen(args) -> int:
    started = time.time()
    endpoint = _make_endpoint(args)
    if args.action == "discover":
        attrs = ag.discover(args.super_category, endpoint, class_unit=args.class_unit)
        for name in attrs.names:
            print(name)
        return 0

    super_category, class_unit, samples = ag.load_corpus(args.corpus)
    if args.super_category:
        super_category = args.super_category
    if args.action == "extract":
        attrs = ag.discover(super_category, endpoint, class_unit=class_unit)
        for sample in samples:
            result = ag.extract(sample.sample_id, super_category, attrs, endpoint,
                                image=sample.image)
            status = "ok" if not result.failed else f"failed keys: {sorted(result.failed)}"
            print(f"{sample.sample_id}: {len(result.values)} values ({status})")
        return 0
    if args.action == "summarize" or args.action == "run":
        payload = ag.run_pipeline(samples, super_category, endpoint,
                                  class_unit=class_unit, max_workers=args.workers)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        ag.save_triples(payload, out)
        inputs = [args.corpus] + ([args.transcript] if args.transcript else [])
        _write_manifest("attribgen", {"action": args.action, "super": super_category},
                        inputs, [out], DEFAULT_SEED,
                        out.with_name(out.name + ".manifest.json"), started=started)
        print(f"wrote triples for {len(samples)} samples -> {out}")
        return 0
    raise InvalidConfig(f"unknown attribgen action {args.action!r}")  # pragma: no cover


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attralign",
        description="Contrastive object/attribute/category alignment lab",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, threads=True):
        if config:
            p.add_argument("--config", help="JSON config file; flags win")
        if threads:
            p.add_argument("--threads", type=int, default=1,
                           help="reserved; execution is sequential and deterministic")

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--dim-object", type=int)
    p.add_argument("--dim-text", type=int)
    p.add_argument("--spread", type=float)
    p.add_argument("--sigma", type=float, help="intra-class object noise")
    p.add_argument("--offset", type=float, help="modality gap offset norm")
    p.add_argument("--attr-noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)
    common(p)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("inspect", help="print a dataset summary")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("mine", help="mine hard negatives over the train split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("-o", "--output", default="negatives.json")
    common(p)
    p.set_defaults(func=_cmd_mine)

    def train_flags(p):
        p.add_argument("--stage1-batch", type=int)
        p.add_argument("--stage1-epochs", type=int)
        p.add_argument("--stage1-lr", type=float)
        p.add_argument("--stage1-warmup", type=int)
        p.add_argument("--stage2-batch", type=int)
        p.add_argument("--stage2-epochs", type=int)
        p.add_argument("--stage2-lr", type=float)
        p.add_argument("--stage2-warmup", type=int)
        p.add_argument("--temperature", type=float)
        p.add_argument("--k", type=int, help="hard negatives per sample")
        p.add_argument("--micro-batch", type=int)
        p.add_argument("--one-stage-weight", type=float)
        p.add_argument("--dim-shared", type=int)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="run the training schedule")
    p.add_argument("--dataset", required=True)
    p.add_argument("--negatives", help="mined negatives file; mined on the fly if absent")
    p.add_argument("--mode", choices=[m.value for m in train_mod.TrainMode])
    p.add_argument("--contrast", choices=[c.value for c in train_mod.ContrastMode])
    p.add_argument("--probe", action="store_true", help="include linear probes in metrics")
    p.add_argument("--out", default="train_run")
    train_flags(p)
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("ablate", help="run the ablation suite")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seeds", type=int, help="number of seeds (>= 5 for the full suite)")
    p.add_argument("--out", default="ablate_run")
    train_flags(p)
    common(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("probe", help="linear-probe object features")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--source", choices=["raw", "projected"], default="raw")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("diag", help="full metrics report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--out", default="diag_out")
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(func=_cmd_diag)

    p = sub.add_parser("eval", help="multiple-choice evaluation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--choices", default="all", help='"all" or an integer')
    p.add_argument("--out", help="write the confusion grid here")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export", help="export embeddings for plotting")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", help="project through this checkpoint first")
    p.add_argument("--space", choices=["object", "attribute", "category"], default="object")
    p.add_argument("--method", choices=["pca2d", "raw"], default="pca2d")
    p.add_argument("--out", default="projection.csv")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("attribgen", help="attribute description construction")
    p.add_argument("action", choices=["discover", "extract", "summarize", "run"])
    p.add_argument("--super-category", default="")
    p.add_argument("--class-unit", default="categories")
    p.add_argument("--corpus", help="corpus JSON (id, category_id, image per sample)")
    p.add_argument("--endpoint", help="endpoint config JSON")
    p.add_argument("--transport", choices=["http", "transcript"], default="http")
    p.add_argument("--transcript", help="recorded transcript for replay")
    p.add_argument("--cache", help="response cache directory")
    p.add_argument("--workers", type=int, default=1,
                   help="concurrent per-sample pipelines (output is order-stable)")
    p.add_argument("--out", default="triples.json")
    p.set_defaults(func=_cmd_attribgen)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main(argv=None) -> int:
    try:
        return dispatch(argv)
    except ArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
