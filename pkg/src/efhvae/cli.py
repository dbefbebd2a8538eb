"""Command-line entry point: generate, train, eval, export-latents.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

from .corpus import TEST, CorpusConfig, build_dataset, generate_corpus, load_corpus, save_corpus
from .estimator import FHVAE
from .exceptions import ConfigurationError, DataError, EFHVAEError, NumericError
from .objective import LOSS_FIELDS, HyperConfig
from .probes import (
    binary_content_eval, export_latents, infer_latents, raw_baseline, train_subject_probe, wilcoxon_signed_rank,
)
from .trainer import StageConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_KEYS = ("hidden_size", "n_layers", "latent_dim")
PROBE_KEYS = ("n_folds", "C_reg", "n_iter", "min_per_class")
SECTIONS = ("seed", "corpus", "model", "hyper", "train", "stage1", "stage2", "probes")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Read a run config. Sections: ``seed``, ``corpus``, ``model``, ``hyper``,
    ``train`` (StageConfig names), ``stage1``/``stage2`` overrides, ``probes``."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown sections {sorted(unknown)}")
    return cfg


def _seed(cfg: dict, override):
    if override is not None:
        return override
    return int(cfg.get("seed", cfg.get("corpus", {}).get("seed", 0)))


def corpus_config(cfg: dict, seed) -> CorpusConfig:
    return CorpusConfig.from_dict({**cfg.get("corpus", {}), "seed": seed})


def _check_keys(section: str, got: dict, allowed) -> None:
    unknown = set(got) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown {section} keys: {sorted(unknown)}")


def estimator_params(cfg: dict, stage: int, seed: int) -> dict:
    """FHVAE constructor arguments from the model/hyper/train sections."""
    model = cfg.get("model", {})
    hyper = cfg.get("hyper", {})
    train = {**cfg.get("train", {}), **cfg.get(f"stage{stage}", {})}
    _check_keys("model", model, MODEL_KEYS)
    _check_keys("hyper", hyper, [f.name for f in fields(HyperConfig) if f.name != "latent_dim"])
    _check_keys("train", train, [f.name for f in fields(StageConfig) if f.name not in ("stage", "seed")])
    params = {**model, **hyper}
    renames = {"K": "n_labels_per_batch", "adam_eps": None}
    for k, v in train.items():
        target = renames.get(k, k)
        if target is not None:
            params[target] = v
    params["stage"] = stage
    params["random_state"] = seed
    return params


def probe_params(cfg: dict) -> dict:
    probes = cfg.get("probes", {})
    _check_keys("probes", probes, PROBE_KEYS + ("standardize",))
    return probes


# --------------------------------------------------------------------------
# output helpers


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _publish(staging: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for f in sorted(staging.iterdir()):
        os.replace(f, out / f.name)


def _finite(obj):
    """NaN/inf (e.g. accuracy with no evaluable pairs) become null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _dumps(obj) -> str:
    return json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _load_dataset(corpus_dir):
    _, recordings, seg_len = load_corpus(corpus_dir)
    return build_dataset(recordings, seg_len)


def _load_model(path, ds) -> FHVAE:
    model = FHVAE.load(path)
    C, T = ds.segments.data.shape[2], ds.segments.data.shape[1]
    if model.arch_.n_channels != C:
        raise DataError(f"checkpoint expects {model.arch_.n_channels} channels, corpus has {C}")
    if model.arch_.seg_len != T:
        raise DataError(f"checkpoint expects {model.arch_.seg_len}-frame segments, corpus has {T}")
    return model


# --------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg) -> int:
    ccfg = corpus_config(cfg, _seed(cfg, args.seed))
    recordings = generate_corpus(ccfg)
    save_corpus(args.out, ccfg, recordings)
    print(f"wrote {len(recordings)} recordings to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    if args.stage == 2 and args.init is None:
        raise ConfigurationError("stage 2 needs --init pointing to the stage-1 checkpoint")
    seed = _seed(cfg, args.seed)
    ds = _load_dataset(args.corpus)
    params = estimator_params(cfg, args.stage, seed)
    init = None
    if args.init is not None:
        init = _load_model(args.init, ds)
        arch = init.arch_
        if any(k in cfg.get("model", {}) and cfg["model"][k] != getattr(arch, k) for k in MODEL_KEYS):
            raise ConfigurationError("model section disagrees with the --init checkpoint architecture")
        params.update({k: getattr(arch, k) for k in MODEL_KEYS})
    tr, va = ds.train, ds.val
    model = FHVAE(**params).fit(tr.data, tr.sequence_ids, tr.labels, va.data, va.sequence_ids, va.labels,
                                init=init, n_sequences=ds.n_sequences, n_labels=len(ds.labels))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".train-", dir=out.parent))
    try:
        model.save(staging / "model.fhvz")
        with open(staging / "train_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "split", *LOSS_FIELDS])
            for row in model.history_:
                w.writerow([row["epoch"], row["split"], *(repr(float(row[k])) for k in LOSS_FIELDS)])
        best = {"stage": args.stage, "best_epoch": model.best_epoch_, "best_bound": model.best_bound_,
                "best_score": model.best_score_, "monitor": model.stage_config().monitor,
                "epochs_run": model.n_epochs_, "stopped_early": model.stopped_early_}
        (staging / "best.json").write_text(_dumps(best))
        _publish(staging, out)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"stage {args.stage}: best epoch {model.best_epoch_}, validation bound {model.best_bound_:.4f}")
    return EXIT_OK


def _wilcoxon(a: dict, b: dict):
    keys = sorted(set(a) & set(b))
    if not keys:
        return {"n_pairs": 0, "error": "no label pairs were evaluated"}
    try:
        r = wilcoxon_signed_rank([a[k] for k in keys], [b[k] for k in keys])
    except DataError as exc:
        return {"n_pairs": len(keys), "error": str(exc)}
    return {"W": r.W, "z": r.z, "p": r.p, "n": r.n, "w_plus": r.w_plus, "w_minus": r.w_minus,
            "n_pairs": len(keys)}


def evaluate(model: FHVAE, ds, seed: int, probes: dict) -> dict:
    lat = infer_latents(model, ds.segments)
    test = lat.subset(lat.split == TEST)
    svm_kw = {k: probes[k] for k in PROBE_KEYS if k in probes}
    probe_kw = {"standardize": probes["standardize"]} if "standardize" in probes else {}
    report = {"stage": model.stage, "n_segments": len(lat), "n_test_segments": len(test),
              "subject_accuracy": {}, "content_accuracy": {}}
    content = {}
    for space in ("z1", "z2"):
        subj = train_subject_probe(lat, space, random_state=seed, **probe_kw)
        report["subject_accuracy"][space] = subj.accuracy
        report["subject_chance"] = subj.chance
        content[space] = binary_content_eval(test, space, ds.labels, seed=seed, **svm_kw)
        report["content_accuracy"][space] = content[space].accuracy
    segs = ds.segments.subset(ds.segments.split == TEST)
    raw = raw_baseline(segs, ds.labels, seed=seed, **svm_kw)
    report["raw_baseline_accuracy"] = raw.accuracy
    report["content_pairs"] = len(content["z1"].pair_accuracies)
    report["skipped_pairs"] = [list(p) for p in content["z1"].skipped]
    report["wilcoxon"] = {
        "z1_vs_z2": _wilcoxon(content["z1"].pair_accuracies, content["z2"].pair_accuracies),
        "z1_vs_raw": _wilcoxon(content["z1"].pair_accuracies, raw.pair_accuracies),
    }
    return report


def cmd_eval(args, cfg) -> int:
    ds = _load_dataset(args.corpus)
    model = _load_model(args.ckpt, ds)
    report = evaluate(model, ds, _seed(cfg, args.seed), probe_params(cfg))
    _atomic_write_text(Path(args.out), _dumps(report))
    acc = report["subject_accuracy"], report["content_accuracy"]
    print(f"subject z1 {acc[0]['z1']:.3f} z2 {acc[0]['z2']:.3f}; content z1 {acc[1]['z1']:.3f} "
          f"z2 {acc[1]['z2']:.3f}; raw {report['raw_baseline_accuracy']:.3f}")
    return EXIT_OK


def cmd_export(args, cfg) -> int:
    ds = _load_dataset(args.corpus)
    model = _load_model(args.ckpt, ds)
    export_latents(infer_latents(model, ds.segments), args.out)
    print(f"wrote {len(ds.segments)} rows to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="efhvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON run config")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")

    g = sub.add_parser("generate", help="write a synthetic parallel-recording corpus")
    common(g)
    g.add_argument("--out", required=True, help="corpus directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train stage 1 or stage 2")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--init", help="stage-1 checkpoint (required for stage 2)")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="probe a checkpoint and write eval_report.json")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True, help="report file")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-latents", help="write per-segment posterior means as CSV")
    common(x)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--corpus", required=True)
    x.add_argument("--out", required=True, help="CSV file")
    x.set_defaults(func=cmd_export)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, load_config(args.config))
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EFHVAEError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
