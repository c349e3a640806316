"""Command-line pipeline staged through files in a work directory.

Layout under ``--workdir``::

    data/dataset.xmd, data/manifest.json      gen-data
    source.xmp, source.log.jsonl              pretrain
    stats.gaussian.xms, stats.gmm.xms         fit-stats
    models/<method>.xmp, .log.jsonl           train --method M
    eval/<method>.<layer>.json                eval
    probe/<method>.<layer>.jsonl              probe-units
    report.txt, report.json                   report

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 missing prerequisite,
5 non-finite numbers.  Concurrent commands on one work directory are not
supported.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import curriculum as cur
from . import network as nw
from . import report as rp
from . import retrieval as rt
from . import statmodel as sm
from . import synthdata as sd
from . import unitprobe as up
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("crossmodal")

EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def _all_finite(obj) -> bool:
    if isinstance(obj, float):
        return math.isfinite(obj)
    if isinstance(obj, dict):
        return all(_all_finite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return all(_all_finite(v) for v in obj)
    return True


def _write_metrics(path: Path, metrics: dict) -> None:
    _write_text(path, _dump(metrics))
    if not _all_finite(metrics):
        raise CliError(EXIT_NUMERIC, f"non-finite value in {path}")


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {path}: {e}") from None


def _write_log(path: Path, records: list[dict]) -> None:
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(EXIT_MISSING, f"missing {path} (run `{hint}` first)")
    return path


class Workdir:
    def __init__(self, root: Path):
        self.root = root

    dataset = property(lambda self: self.root / "data" / "dataset.xmd")
    source = property(lambda self: self.root / "source.xmp")

    def stats(self, kind: str) -> Path:
        return self.root / f"stats.{kind}.xms"

    def model(self, method: str) -> Path:
        return self.root / "models" / f"{method}.xmp"

    def eval_file(self, method: str, layer: str) -> Path:
        return self.root / "eval" / f"{method}.{layer}.json"

    def probe_file(self, method: str, layer: str) -> Path:
        return self.root / "probe" / f"{method}.{layer}.jsonl"

    def trained_methods(self) -> list[str]:
        return [m.value for m in cur.MethodId if self.model(m.value).exists()]

    def load_dataset(self) -> sd.Dataset:
        try:
            return sd.read_dataset(_require(self.dataset, "gen-data"))
        except sd.DatasetFormatError as e:
            raise CliError(EXIT_IO, f"{self.dataset}: {e}") from None

    def load_model(self, path: Path, method: str, hint: str) -> cur.TrainedModel:
        try:
            spec, params = nw.read_checkpoint(_require(path, hint))
        except nw.NetworkError as e:
            raise CliError(EXIT_IO, f"{path}: {e}") from None
        return cur.TrainedModel(spec, params, method)


def _train_cfg(rc: RunConfig, **overrides) -> cur.TrainConfig:
    d = dict(rc.train.__dict__)
    d.update(overrides)
    return cur.TrainConfig(**d)


# --- commands -----------------------------------------------------------

def cmd_gen_data(rc: RunConfig, wd: Workdir, args) -> None:
    out = Path(args.out) if args.out else wd.dataset.parent
    ds = sd.generate(rc.data)
    try:
        out.mkdir(parents=True, exist_ok=True)
        sd.write_dataset(ds, out / "dataset.xmd")
        sd.write_manifest(ds, rc.data, out / "manifest.json")
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write dataset to {out}: {e}") from None
    log.info("wrote %s", out / "dataset.xmd")


def cmd_pretrain(rc: RunConfig, wd: Workdir, args) -> None:
    ds = wd.load_dataset()
    cfg = _train_cfg(rc)
    src = cur.pretrain_source(ds, cfg)
    nw.write_checkpoint(wd.source, src.spec, src.params)
    _write_log(wd.root / "source.log.jsonl", src.log)
    split = ds.train[cfg.source_modality]
    _write_metrics(wd.root / "source.metrics.json", {
        "train_accuracy": cur.accuracy(src, split.x, split.labels, cfg.source_modality),
        "initial_loss": src.log[0]["ce"] if src.log else None,
        "final_loss": src.log[-1]["ce"] if src.log else None,
    })


def cmd_fit_stats(rc: RunConfig, wd: Workdir, args) -> None:
    ds = wd.load_dataset()
    src = wd.load_model(wd.source, "source", "pretrain")
    cfg = _train_cfg(rc)
    metrics = {}
    for kind in ("gaussian", "gmm"):
        models = cur.fit_layer_stats(src, ds, cfg.reg_layers, kind, cfg)
        sm.write_stats(wd.stats(kind), models)
        metrics[kind] = {}
        trace = nw.forward(src.params, src.spec, ds.train[cfg.source_modality].x, cfg.source_modality)
        for layer, m in models.items():
            h = trace[layer]
            metrics[kind][layer] = {"dim": m.dim, "mean_nll": float(sm.nll(m, h).mean())}
    _write_metrics(wd.root / "stats.metrics.json", metrics)


def cmd_train(rc: RunConfig, wd: Workdir, args) -> None:
    method = cur.MethodId(args.method)
    ds = wd.load_dataset()
    src = wd.load_model(wd.source, "source", "pretrain")
    stats = None
    if method.stats_kind is not None:
        path = _require(wd.stats(method.stats_kind), "fit-stats")
        try:
            stats = sm.read_stats(path)
        except sm.StatModelError as e:
            raise CliError(EXIT_IO, f"{path}: {e}") from None
    cfg = _train_cfg(rc, method=method)
    model = cur.train(cfg, ds, src, stats)
    out = wd.model(method.value)
    out.parent.mkdir(parents=True, exist_ok=True)
    nw.write_checkpoint(out, model.spec, model.params)
    _write_log(out.with_suffix(".log.jsonl"), model.log)
    _write_metrics(out.with_suffix(".metrics.json"), {
        "method": method.value,
        "steps": cfg.total_steps,
        "final_total": model.log[-1]["total"] if model.log else None,
        "val_accuracy": {m: cur.accuracy(model, ds.val[m].x, ds.val[m].labels, m) for m in ds.modalities},
    })


def _methods(wd: Workdir, args) -> list[str]:
    if getattr(args, "method", None):
        _require(wd.model(args.method), f"train --method {args.method}")
        return [args.method]
    found = wd.trained_methods()
    if not found:
        raise CliError(EXIT_MISSING, f"no trained models under {wd.root / 'models'} (run `train` first)")
    return found


def cmd_eval(rc: RunConfig, wd: Workdir, args) -> None:
    ds = wd.load_dataset()
    layers = [args.layer] if args.layer else list(rc.eval.layers)
    for method in _methods(wd, args):
        model = wd.load_model(wd.model(method), method, "train")
        for layer in layers:
            rep = rt.evaluate(model, ds, layer, rc.eval.num_queries, rc.eval.seed)
            _write_metrics(wd.eval_file(method, layer), {"method": method, **rep.to_dict()})


def cmd_probe_units(rc: RunConfig, wd: Workdir, args) -> None:
    ds = wd.load_dataset()
    layer = args.layer or rc.eval.probe_layer
    for method in _methods(wd, args):
        model = wd.load_model(wd.model(method), method, "train")
        units = up.probe_layer(model, ds, layer, rc.eval.probe_k)
        path = wd.probe_file(method, layer)
        _write_text(path, "".join(json.dumps(u.to_dict(), sort_keys=True) + "\n" for u in units))
        summary = up.summarize(np.array([u.consistency for u in units]))
        _write_metrics(path.with_suffix(".summary.json"), {"method": method, "layer": layer, **summary})


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(EXIT_IO, f"cannot read {path}: {e}") from None


def cmd_report(rc: RunConfig | None, wd: Workdir, args) -> None:
    table_layer = args.layer or "shared2"
    methods = [m.value for m in cur.MethodId if wd.eval_file(m.value, table_layer).exists()]
    if not methods:
        raise CliError(EXIT_MISSING, f"no {table_layer} evaluations under {wd.root / 'eval'} (run `eval` first)")
    reports = {m: _read_json(wd.eval_file(m, table_layer)) for m in methods}
    layer_means: dict[str, dict[str, float]] = {}
    for m in methods:
        layer_means[m] = {}
        for layer in rt.FEATURE_LAYERS:
            f = wd.eval_file(m, layer)
            if f.exists():
                layer_means[m][layer] = _read_json(f)["mean"]
    summaries = {}
    for m in methods:
        for f in sorted((wd.root / "probe").glob(f"{m}.*.summary.json")):
            summaries.setdefault(m, _read_json(f))
    parts = [
        rp.cross_modal_table(reports, table_layer),
        rp.layer_table(layer_means, rt.FEATURE_LAYERS),
        rp.within_table(reports, table_layer),
    ]
    if summaries:
        layer = next(iter(summaries.values()))["layer"]
        parts.append(rp.consistency_table(summaries, layer))
    _write_text(wd.root / "report.txt", "\n\n".join(parts) + "\n")
    _write_metrics(wd.root / "report.json", {
        "layer": table_layer,
        "cross_modal": {m: {"map": r["map"], "mean": r["mean"]} for m, r in reports.items()},
        "layers": layer_means,
        "within": {m: r["within"] for m, r in reports.items()},
        "consistency": summaries,
    })


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "fit-stats": cmd_fit_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe-units": cmd_probe_units,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossmodal", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    methods = [m.value for m in cur.MethodId]
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "report", help="JSON run configuration")
        p.add_argument("--workdir", help="overrides paths.workdir")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        if name == "gen-data":
            p.add_argument("--out", help="dataset directory (default <workdir>/data)")
        if name == "train":
            p.add_argument("--method", required=True, choices=methods)
        if name in ("eval", "probe-units"):
            p.add_argument("--method", choices=methods, help="default: every trained method")
        if name in ("eval", "probe-units", "report"):
            p.add_argument("--layer", choices=rt.FEATURE_LAYERS)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = load_config(args.config, args.seed) if args.config else None
        root = args.workdir or (rc.workdir if rc and rc.workdir else None)
        if root is None:
            if args.command == "gen-data" and args.out:
                root = Path(args.out).parent
            else:
                raise ConfigError("no work directory: pass --workdir or set paths.workdir")
        wd = Workdir(Path(root))
        COMMANDS[args.command](rc, wd, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except cur.TrainingError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except cur.NumericalError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
