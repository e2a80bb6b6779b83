"""Command-line entry point: data generation, training, evaluation, ablation, gradient checks.

Every command resolves its full configuration first, writes a run manifest
next to its output, and only then starts computing. ``replay`` re-runs a
command from a manifest alone.
"""
from __future__ import annotations

import os

# Cap BLAS threads before numpy is imported anywhere.
_threads = os.environ.get("PREDBRANCH_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, field  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402
from ._io import dumps  # noqa: E402
from .errors import FormatError, InvalidArgument, NumericalFailure  # noqa: E402

log = logging.getLogger("predbranch")

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int = 0
    version: str = __version__

    def to_text(self) -> str:
        return dumps(asdict(self)) + "\n"

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(d["command"], d["config"], d.get("inputs", {}), d.get("outputs", {}),
                       int(d.get("seed", 0)), d.get("version", ""))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: not a run manifest ({exc})") from None


def manifest_path(out: str | os.PathLike, is_dir: bool = False) -> Path:
    out = Path(out)
    return out / MANIFEST_NAME if is_dir else out.with_name(out.name + "." + MANIFEST_NAME)


def write_manifest(m: RunManifest, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(m.to_text(), encoding="utf-8")


# --- config resolution -------------------------------------------------------

_TRAIN_FLAGS = {
    "seed": "seed", "groups": "num_groups", "routing": "routing", "lambda_": "lambda_mem",
    "alpha": "alpha", "gamma": "gamma", "margin": "margin", "batch": "batch_size", "iters": "total_iters",
}


def _read_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return d


def resolve_train_config(args) -> dict:
    """TrainConfig from --config (if any) with flag overrides applied; flags win."""
    from .config import KTConfig, TrainConfig

    base = _read_json(args.config) if getattr(args, "config", None) else {}
    kt_keys = set(asdict(KTConfig()))
    flat_kt = {k: base.pop(k) for k in list(base) if k in kt_keys}
    cfg = TrainConfig.from_dict(base)
    if flat_kt:
        cfg = cfg.with_overrides(**flat_kt)
    over = {dst: getattr(args, src) for src, dst in _TRAIN_FLAGS.items() if getattr(args, src, None) is not None}
    return cfg.with_overrides(**over).to_dict()


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise InvalidArgument(f"--k expects a comma list of integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise InvalidArgument("K must be >= 1")
    return ks


# --- command bodies (config and paths already resolved) ----------------------

def run_gen_data(m: RunManifest) -> None:
    from .synthdata import DatasetSpec, generate_dataset, write_dataset

    ds = generate_dataset(DatasetSpec.from_dict(m.config["dataset"]))
    write_dataset(ds, m.outputs["data"])
    print(f"wrote {sum(len(s) for s in ds.splits.values())} samples to {m.outputs['data']}")


def _train_cfg(m: RunManifest):
    from .config import TrainConfig
    return TrainConfig.from_dict(m.config["train"])


def run_pretrain(m: RunManifest) -> None:
    from .synthdata import read_dataset
    from .trainer import pretrain_stage, save_checkpoint, write_loss_log

    ds = read_dataset(m.inputs["data"])
    rows: list = []
    ckpt = pretrain_stage(ds, _train_cfg(m), rows)
    save_checkpoint(ckpt, m.outputs["checkpoint"])
    write_loss_log(rows, m.outputs["loss_log"])
    print(f"baseline trained for {ckpt.iteration} iterations; groups {ckpt.partition.to_dict()['groups']}")


def run_cluster(m: RunManifest) -> None:
    from .clustering import cluster_predicates
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(m.inputs["checkpoint"])
    if ckpt.stats is None:
        raise InvalidArgument("checkpoint has no class statistics to cluster")
    c = m.config["cluster"]
    part = cluster_predicates(ckpt.stats, c["num_groups"], c["linkage"], c["metric"])
    Path(m.outputs["partition"]).write_text(part.to_json() + "\n", encoding="utf-8")
    print(part.to_json())


def run_train(m: RunManifest) -> None:
    from .baseline import class_statistics
    from .clustering import GroupPartition, cluster_predicates
    from .synthdata import read_dataset
    from .trainer import load_checkpoint, save_checkpoint, train_predictor, write_loss_log

    cfg = _train_cfg(m)
    ds = read_dataset(m.inputs["data"])
    pre = load_checkpoint(m.inputs["checkpoint"])
    stats = pre.stats
    if stats is None:
        if pre.baseline is None:
            raise InvalidArgument("checkpoint holds no baseline parameters to initialize from")
        stats = class_statistics(ds, pre.baseline)
    if m.inputs.get("partition"):
        partition = GroupPartition.from_dict(_read_json(m.inputs["partition"]))
    elif pre.partition is not None and pre.partition.num_groups == cfg.num_groups:
        partition = pre.partition
    else:
        partition = cluster_predicates(stats, cfg.num_groups) if cfg.num_groups > 1 else GroupPartition.trivial(ds.spec.A)
    rows: list = []
    ckpt = train_predictor(ds, stats, partition, cfg, rows, baseline=pre.baseline)
    save_checkpoint(ckpt, m.outputs["checkpoint"])
    write_loss_log(rows, m.outputs["loss_log"])
    if rows:
        print(f"trained {cfg.total_iters} iterations; final loss {rows[-1]['L']:.4f}")


def run_eval(m: RunManifest) -> None:
    from .evalreport import evaluate_scores, write_report_csv
    from .synthdata import read_dataset
    from .trainer import load_checkpoint, scores_for

    ds = read_dataset(m.inputs["data"])
    ckpt = load_checkpoint(m.inputs["checkpoint"])
    c = m.config["eval"]
    split = ds.splits[c["split"]]
    if len(split) == 0:
        raise InvalidArgument(f"split {c['split']!r} is empty")
    rep = evaluate_scores(scores_for(ckpt, split, c["routing"]), split.g, split.scene_id,
                          ds.class_counts["train"], c["ks"], ckpt.config)
    write_report_csv(m.outputs["report"], rep.rows(c["name"], m.seed), ds.spec.A)
    for K in rep.ks:
        g = rep.groups[K]
        print(f"mR@{K} {rep.mR[K]:.4f}  top {g['top']:.4f}  middle {g['middle']:.4f}  bottom {g['bottom']:.4f}")


def run_ablate(m: RunManifest) -> None:
    from .config import TrainConfig
    from .evalreport import ablation_run
    from .synthdata import read_dataset

    ds = read_dataset(m.inputs["data"])
    c = m.config["ablate"]
    out = Path(m.outputs["dir"])
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_run(ds, TrainConfig.from_dict(m.config["train"]), c["seeds"], c["ks"], out)
    for r in rows:
        print(f"{r[0]:<10} seed {r[1]}  mR@{r[2]} {r[3]:.4f}  bottom {r[6]:.4f}")
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")


def run_grad_check(m: RunManifest) -> None:
    from .gradsuite import run_suite
    from .numerics import TOL

    results, elapsed = run_suite(m.config["grad_check"]["seeds"])
    worst = max(r.max_rel_error for r in results)
    by_check: dict[str, float] = {}
    for r in results:
        by_check[r.name] = max(by_check.get(r.name, 0.0), r.max_rel_error)
    for name, err in by_check.items():
        print(f"{name:<20} {err:.3e}")
    print(f"max relative error {worst:.3e} ({elapsed:.1f}s)")
    if m.outputs.get("report"):
        Path(m.outputs["report"]).write_text(dumps({"max_rel_error": worst, "checks": by_check}) + "\n",
                                             encoding="utf-8")
    if not worst <= TOL.grad_rel_error:
        raise NumericalFailure(f"gradient check: max relative error {worst:.3e} exceeds {TOL.grad_rel_error}")


RUNNERS = {
    "gen-data": run_gen_data, "pretrain": run_pretrain, "cluster": run_cluster, "train": run_train,
    "eval": run_eval, "ablate": run_ablate, "grad-check": run_grad_check,
}


# --- argv -> manifest --------------------------------------------------------

def _with_suffix(path: str, suffix: str) -> str:
    p = Path(path)
    return str(p.with_name(p.stem + suffix))


def build_manifest(args) -> tuple[RunManifest, Path]:
    cmd = args.command
    if cmd == "gen-data":
        from .synthdata import DatasetSpec
        spec = _read_json(args.spec) if args.spec else {}
        spec = asdict(DatasetSpec.from_dict(spec))
        if args.seed is not None:
            spec["seed"] = args.seed
        spec = asdict(DatasetSpec.from_dict(spec))
        m = RunManifest(cmd, {"dataset": spec}, {"spec": args.spec}, {"data": args.out}, spec["seed"])
        return m, manifest_path(args.out)
    if cmd == "grad-check":
        seeds = list(range(args.seed or 0, (args.seed or 0) + args.seeds))
        m = RunManifest(cmd, {"grad_check": {"seeds": seeds}}, {}, {"report": args.out}, seeds[0])
        return m, manifest_path(args.out) if args.out else None
    if cmd == "cluster":
        conf = {"cluster": {"num_groups": args.groups or 2, "linkage": args.linkage, "metric": args.metric}}
        m = RunManifest(cmd, conf, {"checkpoint": args.checkpoint}, {"partition": args.out}, 0)
        return m, manifest_path(args.out)

    train = resolve_train_config(args)
    seed = train["seed"]
    if cmd == "pretrain":
        m = RunManifest(cmd, {"train": train}, {"data": args.data},
                        {"checkpoint": args.out, "loss_log": _with_suffix(args.out, ".loss.csv")}, seed)
        return m, manifest_path(args.out)
    if cmd == "train":
        m = RunManifest(cmd, {"train": train},
                        {"data": args.data, "checkpoint": args.checkpoint, "partition": args.partition},
                        {"checkpoint": args.out, "loss_log": _with_suffix(args.out, ".loss.csv")}, seed)
        return m, manifest_path(args.out)
    if cmd == "eval":
        conf = {"eval": {"ks": _parse_ks(args.k or "20,50,100"), "routing": train["routing"], "split": args.split,
                         "name": args.name}, "train": train}
        m = RunManifest(cmd, conf, {"data": args.data, "checkpoint": args.checkpoint}, {"report": args.out}, seed)
        return m, manifest_path(args.out)
    if cmd == "ablate":
        seeds = list(range(seed, seed + args.seeds))
        conf = {"ablate": {"ks": _parse_ks(args.k or "100"), "seeds": seeds}, "train": train}
        m = RunManifest(cmd, conf, {"data": args.data}, {"dir": args.out}, seed)
        return m, manifest_path(args.out, is_dir=True)
    raise InvalidArgument(f"unknown command {cmd!r}")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON training config; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--groups", type=int, help="number of predicate groups (default 2)")
    p.add_argument("--routing", choices=("hard", "soft"))
    p.add_argument("--lambda", dest="lambda_", metavar="LAMBDA", type=float, help="memory loss weight")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--iters", type=int)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="predbranch", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic long-tailed dataset")
    p.add_argument("--spec", help="JSON dataset spec (defaults for missing fields)")
    p.add_argument("--seed", type=int, help="overrides the seed in --spec")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="train the baseline, compute class statistics, cluster")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _train_flags(p)

    p = sub.add_parser("cluster", help="cluster predicates from a checkpoint's class statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="partition JSON")
    p.add_argument("--groups", type=int)
    p.add_argument("--linkage", choices=("average", "single", "complete"), default="average")
    p.add_argument("--metric", choices=("euclidean", "manhattan", "cosine"), default="euclidean")

    p = sub.add_parser("train", help="train the branched predictor from a pretrain checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrain (or baseline-only) checkpoint")
    p.add_argument("--partition", help="partition JSON; defaults to the checkpoint's")
    p.add_argument("--out", required=True)
    _train_flags(p)

    p = sub.add_parser("eval", help="recall@K report for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--k", help="comma list of K values (default 20,50,100)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--name", default="run", help="config_name column value")
    _train_flags(p)

    p = sub.add_parser("ablate", help="baseline / branch / kt / branch+kt grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    p.add_argument("--k", help="comma list of K values (default 100)")
    _train_flags(p)

    p = sub.add_parser("grad-check", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at --seed")
    p.add_argument("--out", help="optional JSON summary path")

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    return ap


def _execute(m: RunManifest, mpath: Path | None) -> None:
    if mpath is not None:
        write_manifest(m, mpath)
    RUNNERS[m.command](m)


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            m = RunManifest.load(args.manifest)
            if m.command not in RUNNERS:
                raise FormatError(f"{args.manifest}: unknown command {m.command!r}")
            _execute(m, None)
        else:
            m, mpath = build_manifest(args)
            _execute(m, mpath)
    except InvalidArgument as exc:
        print(f"predbranch: invalid-argument: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"predbranch: format-error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailure as exc:
        print(f"predbranch: numerical-failure: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"predbranch: io-error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
