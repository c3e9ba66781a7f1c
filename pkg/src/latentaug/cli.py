"""Command-line surface.

Subcommands: synth, ingest, train-adapter, train-diffusion, generate,
finetune, evaluate, run, sweep, gradcheck.  Config files are JSON whose keys
mirror the corresponding config dataclass fields.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import TrainConfig, build_adapter, finetune_stage3, predict, tap_latent, train_stage1
from .checkpoint import checkpoint_id, read_checkpoint, write_checkpoint
from .condition import ConditionSource
from .diffusion import DenoiserModel, DiffTrainConfig, NoiseSchedule, train_diffusion
from .errors import FormatError, InvalidConfig, LatentAugError, NumericalError
from .gradsuite import run_gradient_suite
from .metrics import compute_metrics
from .pipeline import PipelineConfig, build_condition_source, run_gelda, sweep
from .sampler import AugmentationSet, SamplerConfig, generate_set
from .store import (
    LatentDataset,
    ScenarioSpec,
    SyntheticSpec,
    apply_scenario,
    make_synthetic,
    read_dataset,
    temporal_pool,
    write_dataset,
)

USAGE_ERROR, DATA_ERROR, NUMERICAL_ERROR = 1, 2, 3


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"config is not valid JSON: {exc}") from exc


def _adapter_from_checkpoint(path):
    tensors, header = read_checkpoint(path)
    if header is None or len(header) < 3:
        raise FormatError("adapter checkpoint lacks a header record")
    n_dims = int(header[1])
    dims = [int(d) for d in header[2 : 2 + n_dims]]
    model = build_adapter(dims[0], dims[-1], hidden=tuple(dims[1:-1]))
    for name in model.params.names():
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name!r}")
        model.params.set_value(name, tensors[name])
    model.frozen_prefix = int(header[2 + n_dims]) if len(header) > 2 + n_dims else 0
    return model


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_dict(_load_json(args.config))
    if args.seed is not None:
        spec.seed = args.seed
    dataset = make_synthetic(spec)
    out = Path(args.out) / "synthetic.geld" if Path(args.out).is_dir() else Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nbytes = write_dataset(dataset, out)
    print(f"wrote {len(dataset)} records ({nbytes} bytes) to {out}")
    return 0


def cmd_ingest(args) -> int:
    rows = list(csv.DictReader(Path(args.listing).open()))
    if not rows:
        raise FormatError("empty listing")
    class_names = sorted({r["class"] for r in rows})
    subdomain_names = sorted({r["subdomain"] for r in rows})
    vectors, cids, sids, splits = [], [], [], []
    for r in rows:
        arr = np.load(r["path"])
        vec = temporal_pool(arr) if arr.ndim == 2 else np.asarray(arr, dtype=np.float64)
        vectors.append(vec.astype(np.float32))
        cids.append(class_names.index(r["class"]))
        sids.append(subdomain_names.index(r["subdomain"]))
        splits.append(0 if r["split"] == "train" else 1)
    dataset = LatentDataset.from_arrays(
        np.stack(vectors), cids, sids, splits,
        c=len(class_names), k=len(subdomain_names),
        class_names=class_names, subdomain_names=subdomain_names,
        source_tag=f"ingest({args.listing})",
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nbytes = write_dataset(dataset, out)
    print(f"wrote {len(dataset)} records ({nbytes} bytes) to {out}")
    return 0


def cmd_train_adapter(args) -> int:
    cfg_d = _load_json(args.config) if args.config else {}
    dataset = read_dataset(args.data)
    if cfg_d.get("scenario"):
        dataset = apply_scenario(dataset, ScenarioSpec.from_dict(cfg_d["scenario"]))
    tcfg = TrainConfig.from_dict(cfg_d.get("stage1", cfg_d))
    if args.seed is not None:
        tcfg.seed = args.seed
    hidden = tuple(cfg_d.get("adapter_hidden", (512, 256)))
    model = build_adapter(dataset.manifest.m, dataset.manifest.c, hidden, seed=tcfg.seed)
    model, history = train_stage1(model, dataset, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .pipeline import _adapter_header

    write_checkpoint(out / "adapter.gelw", model.params.state_arrays(), header=_adapter_header(model))
    (out / "adapter_history.json").write_text(json.dumps(history, indent=2) + "\n")
    print(f"final loss {history[-1]['loss']:.6f}; checkpoint {checkpoint_id(out / 'adapter.gelw')[:12]}")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg_d = _load_json(args.config) if args.config else {}
    pcfg = PipelineConfig.from_dict({**cfg_d, "dataset_path": args.data, "out_dir": args.out})
    dataset = read_dataset(args.data)
    if pcfg.scenario.kind != "none":
        dataset = apply_scenario(dataset, pcfg.scenario)
    model = _adapter_from_checkpoint(args.adapter) if args.adapter else None
    vec, cls, sub = dataset.arrays_for_split("train")
    latents = tap_latent(model, vec, pcfg.tap_layer) if model else vec
    pools = None
    if pcfg.condition_mode == "class_plus_subdomain_latent":
        pools = [latents[sub == k] for k in range(dataset.manifest.k)]
    source = build_condition_source(pcfg, dataset, pools)
    dcfg = pcfg.diffusion
    if args.seed is not None:
        dcfg.seed = args.seed
    denoiser, history = train_diffusion(
        latents, cls, sub, source, dcfg, hidden=pcfg.denoiser_hidden, time_dim=pcfg.time_dim
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sched = denoiser.schedule
    header = np.array(
        [1, denoiser.input_width, sched.sigma_min, sched.sigma_max, sched.sigma_data],
        dtype=np.float32,
    )
    write_checkpoint(out / "denoiser.gelw", denoiser.params.state_arrays(), header=header)
    (out / "diffusion_history.json").write_text(json.dumps(history, indent=2) + "\n")
    print(
        f"final loss {history['loss_curve'][-1]['loss']:.6f}; "
        f"null fraction {history['null_fraction']:.4f}"
    )
    return 0


def _rebuild_denoiser(ckpt_path, pcfg: PipelineConfig, dataset, pools) -> DenoiserModel:
    tensors, header = read_checkpoint(ckpt_path)
    if header is None or len(header) < 5:
        raise FormatError("denoiser checkpoint lacks a header record")
    schedule = NoiseSchedule(float(header[2]), float(header[3]), float(header[4]))
    source = build_condition_source(pcfg, dataset, pools)
    model = DenoiserModel(
        int(header[1]), source, schedule, hidden=pcfg.denoiser_hidden, time_dim=pcfg.time_dim
    )
    for name in model.params.names():
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name!r}")
        model.params.set_value(name, tensors[name])
    return model


def cmd_generate(args) -> int:
    cfg_d = _load_json(args.config) if args.config else {}
    pcfg = PipelineConfig.from_dict({**cfg_d, "out_dir": args.out})
    dataset = read_dataset(args.data)
    if pcfg.scenario.kind != "none":
        dataset = apply_scenario(dataset, pcfg.scenario)
    adapter_model = _adapter_from_checkpoint(args.adapter) if args.adapter else None
    vec, _, sub = dataset.arrays_for_split("train")
    latents = tap_latent(adapter_model, vec, pcfg.tap_layer) if adapter_model else vec
    pools = None
    if pcfg.condition_mode == "class_plus_subdomain_latent":
        pools = [latents[sub == k] for k in range(dataset.manifest.k)]
    model = _rebuild_denoiser(args.model, pcfg, dataset, pools)
    classes = [int(c) for c in args.classes.split(",")]
    scfg = pcfg.sampler
    seed = args.seed if args.seed is not None else scfg.seed
    target = args.subdomain
    aug = generate_set(model, classes, args.n, target, scfg, seed, model_id=checkpoint_id(args.model))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    aug_ds = aug.to_dataset(dataset.manifest.c, dataset.manifest.k,
                            class_names=dataset.manifest.class_names,
                            subdomain_names=dataset.manifest.subdomain_names)
    nbytes = write_dataset(aug_ds, out / "augmented.geld")
    print(f"wrote {len(aug_ds)} augmented records ({nbytes} bytes)")
    return 0


def cmd_finetune(args) -> int:
    cfg_d = _load_json(args.config) if args.config else {}
    pcfg = PipelineConfig.from_dict({**cfg_d, "out_dir": args.out})
    model = _adapter_from_checkpoint(args.adapter)
    gt = read_dataset(args.gt)
    aug = None
    if args.aug:
        aug_ds = read_dataset(args.aug)
        aug = AugmentationSet(
            vectors=aug_ds.vectors,
            class_ids=aug_ds.class_ids,
            subdomain_ids=aug_ds.subdomain_ids,
        )
    tcfg = pcfg.stage3
    if args.seed is not None:
        tcfg.seed = args.seed
    tuned, history = finetune_stage3(model, args.layer, gt, aug, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .pipeline import _adapter_header

    write_checkpoint(out / "adapter_finetuned.gelw", tuned.params.state_arrays(),
                     header=_adapter_header(tuned))
    print(f"final loss {history[-1]['loss']:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    model = _adapter_from_checkpoint(args.adapter)
    dataset = read_dataset(args.data)
    vec, labels, sub = dataset.arrays_for_split("test")
    if args.subdomain is not None:
        mask = sub == args.subdomain
        vec, labels = vec[mask], labels[mask]
    preds = predict(model, vec)
    counts = dataset.train_class_counts(subdomain=args.subdomain)
    report = compute_metrics(preds, labels, counts, excluded_class=args.excluded_class)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv(dataset.manifest.class_names))
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = PipelineConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out != ".":
        cfg.out_dir = args.out
    report = run_gelda(cfg)
    print(
        f"baseline UA {report.baseline.ua:.2f} -> GeLDA UA {report.gelda.ua:.2f} "
        f"(gain {report.gelda.ua - report.baseline.ua:+.2f})"
    )
    return 0


def cmd_sweep(args) -> int:
    cfg = PipelineConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out != ".":
        cfg.out_dir = args.out
    values = args.values.split(",")
    if args.axis in ("n_aug", "tap_layer"):
        values = [int(v) for v in values]
    results = sweep(cfg, args.axis, values)
    failures = [r for r in results if "error" in r]
    print(f"{len(results) - len(failures)}/{len(results)} sweep points succeeded")
    for r in failures:
        print(f"  {r['value']}: {r['error']}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = run_gradient_suite(n_cases=args.cases, seed=args.seed or 0)
    print(f"max relative gradient error over {args.cases} cases: {worst:.3e}")
    if worst >= 1e-4:
        raise NumericalError(f"gradient suite failed: {worst:.3e} >= 1e-4")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentaug",
        description="Latent-space generative data augmentation toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("--out", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic GELD dataset")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="pool and convert external vectors")
    p.add_argument("--listing", required=True, help="CSV with columns path,class,subdomain,split")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train-adapter", parents=[common], help="stage-1 adapter training")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_train_adapter)

    p = sub.add_parser("train-diffusion", parents=[common], help="stage-2 denoiser training")
    p.add_argument("--data", required=True)
    p.add_argument("--adapter", help="adapter checkpoint for tapping latents")
    p.set_defaults(fn=cmd_train_diffusion)

    p = sub.add_parser("generate", parents=[common], help="sample an augmentation set")
    p.add_argument("--model", required=True, help="denoiser checkpoint")
    p.add_argument("--data", required=True, help="dataset supplying condition pools")
    p.add_argument("--adapter", help="adapter checkpoint for tapping pools")
    p.add_argument("--classes", required=True, help="comma-separated class ids")
    p.add_argument("--n", type=int, default=200, help="samples per class")
    p.add_argument("--subdomain", type=int, default=None, help="target subdomain id")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("finetune", parents=[common], help="stage-3 fine-tuning")
    p.add_argument("--adapter", required=True)
    p.add_argument("--gt", required=True, help="GELD of ground-truth latents in the tap space")
    p.add_argument("--aug", help="GELD of augmented latents")
    p.add_argument("--layer", type=int, default=0)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common], help="score an adapter on a test split")
    p.add_argument("--adapter", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subdomain", type=int, default=None)
    p.add_argument("--excluded-class", type=int, default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("run", parents=[common], help="full three-stage pipeline")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="run the pipeline across one axis")
    p.add_argument("--axis", required=True, choices=("denoiser_size", "n_aug", "tap_layer"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gradcheck", parents=[common], help="randomized gradient suite")
    p.add_argument("--cases", type=int, default=100)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 on --help/--version
        return 0 if exc.code == 0 else USAGE_ERROR
    try:
        if getattr(args, "config", None) is None and args.command in ("run", "sweep", "synth"):
            print("error: --config is required for this command", file=sys.stderr)
            return USAGE_ERROR
        return args.fn(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except LatentAugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
