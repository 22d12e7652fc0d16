"""Command-line front end: seeded, reproducible experiment runs.

Commands: synth, train, eval, transfer, detmetrics, ablate, baseline.
Options resolve in three layers: built-in defaults, then the ``--config``
INI file (section name = command name, keys = option names), then explicit
flags.  Every output file starts with a comment line carrying the toolkit
version, the resolved master seed, and a hash of the resolved options, and
reruns with identical inputs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import DEFAULT_C_GRID, baseline_pipeline
from .dataset import (
    Dataset,
    Split,
    STRATIFIED,
    identity_disjoint_split,
    load_dataset,
    load_split,
    save_dataset,
    stratified_splits,
    synth_gaussian,
)
from .detection import detection_report, load_boxes
from .evaluation import (
    TrialConfig,
    classification_accuracy,
    closed_set_eval,
    open_set_eval,
    tar_at_far,
    verification_eval,
    verification_scores,
)
from .loss import LOSS_CSV_HEADER, LossConfig
from .model import TrainConfig, embed, load_head, save_head, train

_SYNTH_DEFAULTS = {
    "identities": 20, "per_id": 50, "dim": 64,
    "center_scale": 1.0, "sigma": 0.3,
    "seed": 0, "out": "out", "jobs": 1,
}
_TRAIN_DEFAULTS = {
    "data": None, "split": None, "objective": "mfid", "architecture": "mlp1",
    "embed_dim": 32, "epochs": 50, "batch_pairs": 16, "lr": 1e-3,
    "decay_factor": 0.1, "decay_every": 20, "margin": 1.0,
    "sim_weight": 1.0, "dissim_weight": 1.0, "similar_fraction": 0.5,
    "momentum": 0.0, "seed": 0, "out": "out", "jobs": 1,
}
_EVAL_DEFAULTS = {
    "data": None, "model": None, "protocols": "closed,open,verif",
    "splits": 5, "test_fraction": 0.2, "trials": 100,
    "gallery_per_identity": 1, "distractors": 6, "far": 0.01,
    "distractor_mode": "fixed", "split_file": None,
    "seed": 0, "out": "out", "jobs": 1,
}
_TRANSFER_DEFAULTS = {
    "model": None, "data": None, "source_name": None,
    "test_fraction": 0.2, "trials": 100, "gallery_per_identity": 1,
    "distractors": 6, "far": 0.01, "distractor_mode": "fixed",
    "seed": 0, "out": "out", "jobs": 1,
}
_DETMETRICS_DEFAULTS = {
    "detections": None, "ground_truth": None, "iou_threshold": 0.5,
    "seed": 0, "out": "out", "jobs": 1,
}
_ABLATE_DEFAULTS = {
    "data": None, "seeds": 10, "objectives": "mfid,cross_entropy",
    "identities": 20, "per_id": 50, "dim": 64,
    "center_scale": 1.0, "sigma": 0.3,
    "architecture": "mlp1", "embed_dim": 32, "epochs": 50, "batch_pairs": 16,
    "lr": 1e-3, "decay_factor": 0.1, "decay_every": 20, "margin": 1.0,
    "test_fraction": 0.2, "trials": 100, "gallery_per_identity": 1,
    "distractors": 6, "far": 0.01,
    "seed": 0, "out": "out", "jobs": 1,
}
_BASELINE_DEFAULTS = {
    "data": None, "splits": 5, "test_fraction": 0.2, "energy": 0.99,
    "c_grid": ",".join(repr(c) for c in DEFAULT_C_GRID),
    "validation_fraction": 0.2,
    "seed": 0, "out": "out", "jobs": 1,
}

_DEFAULTS = {
    "synth": _SYNTH_DEFAULTS, "train": _TRAIN_DEFAULTS, "eval": _EVAL_DEFAULTS,
    "transfer": _TRANSFER_DEFAULTS, "detmetrics": _DETMETRICS_DEFAULTS,
    "ablate": _ABLATE_DEFAULTS, "baseline": _BASELINE_DEFAULTS,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfid",
        description="Metric learning and open-set identification over feature vectors.")
    parser.add_argument("--version", action="version", version=f"mfid {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, defaults in _DEFAULTS.items():
        sub = subparsers.add_parser(command)
        sub.add_argument("--config", default=None,
                         help="INI file; section [%s] supplies option defaults" % command)
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if key in ("seed", "jobs"):
                sub.add_argument(flag, type=int, default=argparse.SUPPRESS)
            elif isinstance(default, bool):
                sub.add_argument(flag, type=_parse_bool, default=argparse.SUPPRESS)
            elif isinstance(default, int):
                sub.add_argument(flag, type=int, default=argparse.SUPPRESS)
            elif isinstance(default, float):
                sub.add_argument(flag, type=float, default=argparse.SUPPRESS)
            else:
                sub.add_argument(flag, default=argparse.SUPPRESS)
    return parser


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _cast_like(default, raw: str):
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _resolve_options(args: argparse.Namespace) -> dict:
    command = args.command
    options = dict(_DEFAULTS[command])
    if args.config:
        config_path = Path(args.config)
        if not config_path.is_file():
            raise ValueError(f"config file not found: {config_path}")
        ini = configparser.ConfigParser()
        ini.read(config_path, encoding="utf-8")
        if ini.has_section(command):
            for key, raw in ini.items(command):
                key = key.replace("-", "_")
                if key not in options:
                    raise ValueError(f"unknown config key {key!r} in [{command}]")
                reference = _DEFAULTS[command][key]
                options[key] = _cast_like(reference if reference is not None else "",
                                          raw)
    for key, value in vars(args).items():
        if key in options:
            options[key] = value
    return options


def _config_hash(command: str, options: dict) -> str:
    # out and jobs are execution details: the same experiment written to a
    # different directory or run in parallel must hash (and byte-compare)
    # the same.
    canonical = "\n".join(f"{command}.{key}={options[key]!r}"
                          for key in sorted(options) if key not in ("out", "jobs"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _header(command: str, options: dict) -> str:
    return (f"mfid {__version__} cmd={command} seed={options['seed']} "
            f"config={_config_hash(command, options)}")


def _out_dir(options: dict) -> Path:
    out = Path(options["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(path: Path, header: str, column_line: str, rows) -> None:
    lines = [f"# {header}", column_line]
    lines.extend(rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(options: dict, *keys: str) -> None:
    for key in keys:
        if options[key] is None:
            raise ValueError(f"missing required option --{key.replace('_', '-')}")


def _map_indexed(work, count: int, jobs: int) -> list:
    """Run ``work(i)`` for i in range(count); parallel only when jobs > 1."""
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(work, range(count)))
    return [work(i) for i in range(count)]


def _child_seed(root: np.random.SeedSequence) -> int:
    return int(root.generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(options: dict) -> None:
    ds = synth_gaussian(options["identities"], options["per_id"],
                        options["dim"], options["center_scale"],
                        options["sigma"], options["seed"])
    out = _out_dir(options)
    header = _header("synth", options)
    save_dataset(ds, out / "dataset.csv", "csv", header_comment=header)
    save_dataset(ds, out / "dataset.bin", "binary")
    manifest = [f"# {header}"]
    manifest.extend(f"{key}={options[key]!r}" for key in
                    ("identities", "per_id", "dim", "center_scale",
                     "sigma", "seed"))
    manifest.append(f"n_samples={ds.n_samples}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")


def _train_config(options: dict) -> TrainConfig:
    loss_cfg = LossConfig(margin=options["margin"],
                          sim_weight=options["sim_weight"],
                          dissim_weight=options["dissim_weight"])
    return TrainConfig(
        epochs=options["epochs"], batch_pairs=options["batch_pairs"],
        initial_lr=options["lr"], decay_factor=options["decay_factor"],
        decay_every=options["decay_every"], objective=options["objective"],
        loss=loss_cfg, seed=options["seed"],
        architecture=options["architecture"], embed_dim=options["embed_dim"],
        similar_fraction=options["similar_fraction"],
        momentum=options["momentum"])


def cmd_train(options: dict) -> None:
    _require(options, "data")
    ds = load_dataset(options["data"])
    if options["split"]:
        split = load_split(options["split"])
    else:
        split = Split(np.arange(ds.n_samples), np.empty(0, dtype=np.int64),
                      STRATIFIED, options["seed"])
    model = train(ds, split, _train_config(options))
    out = _out_dir(options)
    save_head(model.head, out / "model.mfhd")
    rows = [report.csv_row(epoch) for epoch, report in enumerate(model.loss_history)]
    _write_report(out / "loss_history.csv", _header("train", options),
                  LOSS_CSV_HEADER, rows)


def _trial_config(options: dict, seed: int) -> TrialConfig:
    return TrialConfig(trials=options["trials"],
                       gallery_images_per_identity=options["gallery_per_identity"],
                       distractor_identities=options["distractors"],
                       far_target=options["far"],
                       seed=seed,
                       distractor_mode=options.get("distractor_mode", "fixed"))


_ROC_GRID = tuple(np.round(np.linspace(0.01, 1.0, 100), 10))


def cmd_eval(options: dict) -> None:
    _require(options, "data", "model")
    ds = load_dataset(options["data"])
    head = load_head(options["model"])
    protocols = [p.strip() for p in options["protocols"].split(",") if p.strip()]
    aliases = {"verif": "verification", "closed": "closed_set", "open": "open_set"}
    protocols = [aliases.get(p, p) for p in protocols]
    known = {"classification", "closed_set", "open_set", "verification"}
    unknown = [p for p in protocols if p not in known]
    if unknown:
        raise ValueError(f"unknown protocol {unknown[0]!r}")
    if ds.dim != head.input_dim:
        raise ValueError(f"dataset dim {ds.dim} does not match model input dim "
                         f"{head.input_dim}")

    n_splits = options["splits"]
    provided = None
    if options["split_file"]:
        provided = [load_split(stem.strip())
                    for stem in options["split_file"].split(",") if stem.strip()]
        n_splits = len(provided)
    split_children = np.random.SeedSequence(options["seed"]).spawn(n_splits)

    disjoint_wanted = [p for p in protocols if p != "classification"]
    strat_splits = (stratified_splits(ds, n_splits, options["test_fraction"],
                                      options["seed"])
                    if "classification" in protocols else None)

    def eval_split(i: int):
        split_seed_stream, trial_stream = split_children[i].spawn(2)
        trial_seed = _child_seed(trial_stream)
        rows, cmc, roc_tars = [], None, None
        if disjoint_wanted:
            if provided is not None:
                split = provided[i]
            else:
                split = identity_disjoint_split(ds, options["test_fraction"],
                                                _child_seed(split_seed_stream))
            embeddings = embed(head, ds.features[split.test_indices])
            test_labels = ds.labels[split.test_indices]
            cfg = _trial_config(options, trial_seed)
            if "closed_set" in protocols:
                report = closed_set_eval(embeddings, test_labels, cfg)
                rows.append(("closed_set", i, report.mean, report.std, ""))
                cmc = report.curve
            if "open_set" in protocols:
                report = open_set_eval(embeddings, test_labels, cfg)
                mean_tau = float(np.mean(report.thresholds))
                rows.append(("open_set", i, report.mean, report.std, repr(mean_tau)))
            if "verification" in protocols:
                report = verification_eval(embeddings, test_labels, cfg)
                rows.append(("verification", i, report.mean, report.std,
                             repr(report.thresholds[0])))
                positives, negatives = verification_scores(embeddings, test_labels)
                roc_tars = [tar_at_far(positives, negatives, far)[0]
                            for far in _ROC_GRID]
        if "classification" in protocols:
            split = strat_splits[i]
            accuracy = classification_accuracy(
                head, ds.features[split.test_indices], ds.labels[split.test_indices])
            rows.append(("classification", i, accuracy, 0.0, ""))
        return rows, cmc, roc_tars

    results = _map_indexed(eval_split, n_splits, options["jobs"])
    out = _out_dir(options)
    header = _header("eval", options)

    metric_rows = []
    by_protocol: dict[str, list[float]] = {}
    for rows, _, _ in results:
        for protocol, split_idx, mean, std, tau in rows:
            metric_rows.append(f"{protocol},{split_idx},{mean!r},{std!r},{tau}")
            by_protocol.setdefault(protocol, []).append(mean)
    for protocol in sorted(by_protocol):
        values = np.asarray(by_protocol[protocol])
        metric_rows.append(
            f"{protocol},mean,{float(values.mean())!r},{float(values.std())!r},")
    _write_report(out / "metrics.csv", header,
                  "protocol,split,mean,std,threshold", metric_rows)

    cmc_curves = [cmc for _, cmc, _ in results if cmc is not None]
    if cmc_curves:
        stacked = np.asarray([[point[1] for point in curve] for curve in cmc_curves])
        averaged = stacked.mean(axis=0)
        rows = [f"{rank + 1},{float(rate)!r}" for rank, rate in enumerate(averaged)]
        _write_report(out / "cmc.csv", header, "rank,rate", rows)

    roc_lists = [tars for _, _, tars in results if tars is not None]
    if roc_lists:
        averaged = np.asarray(roc_lists).mean(axis=0)
        rows = [f"{float(far)!r},{float(tar)!r}"
                for far, tar in zip(_ROC_GRID, averaged)]
        _write_report(out / "roc.csv", header, "far,tar", rows)


def cmd_transfer(options: dict) -> None:
    _require(options, "model", "data")
    head = load_head(options["model"])
    ds = load_dataset(options["data"])
    if ds.dim != head.input_dim:
        raise ValueError(f"dataset dim {ds.dim} does not match model input dim "
                         f"{head.input_dim}")
    source = options["source_name"] or Path(options["model"]).stem
    target = Path(options["data"]).stem
    pair = f"{source}->{target}"
    split = identity_disjoint_split(ds, options["test_fraction"], options["seed"])
    embeddings = embed(head, ds.features[split.test_indices])
    test_labels = ds.labels[split.test_indices]
    cfg = _trial_config(options, options["seed"])
    closed = closed_set_eval(embeddings, test_labels, cfg)
    opened = open_set_eval(embeddings, test_labels, cfg)
    verif = verification_eval(embeddings, test_labels, cfg)
    out = _out_dir(options)
    header = _header("transfer", options)
    rows = [
        f"closed_set,{pair},{closed.mean!r},{closed.std!r},",
        f"open_set,{pair},{opened.mean!r},{opened.std!r},"
        f"{float(np.mean(opened.thresholds))!r}",
        f"verification,{pair},{verif.mean!r},{verif.std!r},"
        f"{verif.thresholds[0]!r}",
    ]
    _write_report(out / "transfer_metrics.csv", header,
                  "protocol,pair,mean,std,threshold", rows)
    cmc_rows = [f"{int(rank)},{rate!r}" for rank, rate in closed.curve]
    _write_report(out / "transfer_cmc.csv", header, "rank,rate", cmc_rows)
    roc_rows = [f"{far!r},{tar!r}" for far, tar in verif.curve]
    _write_report(out / "transfer_roc.csv", header, "far,tar", roc_rows)


def cmd_detmetrics(options: dict) -> None:
    _require(options, "detections", "ground_truth")
    detections = load_boxes(options["detections"], with_confidence=True)
    ground_truths = load_boxes(options["ground_truth"], with_confidence=False)
    report = detection_report(detections, ground_truths, options["iou_threshold"])
    out = _out_dir(options)
    header = _header("detmetrics", options)
    _write_report(out / "detection_metrics.csv", header,
                  "map,tpr,fpr_per_image,iou_threshold",
                  [f"{report.mean_ap!r},{report.tpr!r},{report.fpr_per_image!r},"
                   f"{report.iou_threshold!r}"])
    match_rows = []
    for image_id in sorted(report.per_image):
        for det, flag in report.per_image[image_id]:
            match_rows.append(
                f"{image_id},{det.x_min!r},{det.y_min!r},{det.x_max!r},"
                f"{det.y_max!r},{(det.confidence or 0.0)!r},{int(flag)}")
    _write_report(out / "matches.csv", header,
                  "image_id,x_min,y_min,x_max,y_max,confidence,tp", match_rows)


def cmd_ablate(options: dict) -> None:
    arms = [a.strip() for a in options["objectives"].split(",") if a.strip()]
    if len(arms) != 2:
        raise ValueError("--objectives must name exactly two training objectives")
    fixed_ds = load_dataset(options["data"]) if options["data"] else None
    root = np.random.SeedSequence(options["seed"])
    children = root.spawn(options["seeds"])

    def run_seed(i: int):
        data_stream, split_stream, train_stream, trial_stream = children[i].spawn(4)
        if fixed_ds is not None:
            ds = fixed_ds
        else:
            ds = synth_gaussian(options["identities"], options["per_id"],
                                options["dim"], options["center_scale"],
                                options["sigma"], _child_seed(data_stream))
        split = identity_disjoint_split(ds, options["test_fraction"],
                                        _child_seed(split_stream))
        train_seed = _child_seed(train_stream)
        trial_seed = _child_seed(trial_stream)
        metrics = []
        for arm in arms:
            loss_cfg = LossConfig(margin=options["margin"])
            cfg = TrainConfig(
                epochs=options["epochs"], batch_pairs=options["batch_pairs"],
                initial_lr=options["lr"], decay_factor=options["decay_factor"],
                decay_every=options["decay_every"], objective=arm, loss=loss_cfg,
                seed=train_seed, architecture=options["architecture"],
                embed_dim=options["embed_dim"])
            model = train(ds, split, cfg)
            embeddings = embed(model.head, ds.features[split.test_indices])
            test_labels = ds.labels[split.test_indices]
            trial_cfg = _trial_config({**options, "distractor_mode": "fixed"},
                                      trial_seed)
            verif = verification_eval(embeddings, test_labels, trial_cfg)
            closed = closed_set_eval(embeddings, test_labels, trial_cfg)
            metrics.append((verif.mean, closed.mean))
        return metrics

    results = _map_indexed(run_seed, options["seeds"], options["jobs"])
    wins = {arms[0]: 0, arms[1]: 0, "tie": 0}
    rows = []
    for i, ((tar_a, rank1_a), (tar_b, rank1_b)) in enumerate(results):
        if tar_a > tar_b:
            winner = arms[0]
        elif tar_b > tar_a:
            winner = arms[1]
        else:
            winner = "tie"
        wins[winner] += 1
        rows.append(f"{i},{tar_a!r},{tar_b!r},{rank1_a!r},{rank1_b!r},{winner}")
    tars = np.asarray([[m[0][0], m[1][0]] for m in results], dtype=np.float64)
    rows.append(f"summary,{float(tars[:, 0].mean())!r},{float(tars[:, 1].mean())!r},"
                f",,{arms[0]}:{wins[arms[0]]}|{arms[1]}:{wins[arms[1]]}"
                f"|tie:{wins['tie']}")
    _write_report(_out_dir(options) / "ablation.csv", _header("ablate", options),
                  f"seed,{arms[0]}_tar,{arms[1]}_tar,"
                  f"{arms[0]}_rank1,{arms[1]}_rank1,tar_winner", rows)


def cmd_baseline(options: dict) -> None:
    _require(options, "data")
    ds = load_dataset(options["data"])
    grid = [float(v) for v in str(options["c_grid"]).split(",") if v.strip()]
    splits = stratified_splits(ds, options["splits"], options["test_fraction"],
                               options["seed"])

    def run_split(i: int):
        split = splits[i]
        return baseline_pipeline(
            ds.features[split.train_indices], ds.labels[split.train_indices],
            ds.features[split.test_indices], ds.labels[split.test_indices],
            energy_threshold=options["energy"], c_grid=grid,
            validation_fraction=options["validation_fraction"],
            seed=options["seed"])

    accuracies = _map_indexed(run_split, options["splits"], options["jobs"])
    rows = [f"{i},{acc!r}" for i, acc in enumerate(accuracies)]
    values = np.asarray(accuracies)
    rows.append(f"mean,{float(values.mean())!r}")
    rows.append(f"std,{float(values.std())!r}")
    _write_report(_out_dir(options) / "baseline.csv", _header("baseline", options),
                  "split,accuracy", rows)


_COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "transfer": cmd_transfer, "detmetrics": cmd_detmetrics,
    "ablate": cmd_ablate, "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        options = _resolve_options(args)
        _COMMANDS[args.command](options)
    except Exception as exc:  # single reporting point for the exit-code contract
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
