"""Command line front end.

    sketchgp simulate  CONFIG      synthetic train/test/truth files
    sketchgp fit       CONFIG      H sketched posteriors plus a manifest
    sketchgp combine   CONFIG      collaborative quantiles and density data
    sketchgp predict   CONFIG      per-sketch and collaborative predictive draws
    sketchgp eval      CONFIG      EvalReport csv and table
    sketchgp federate  CONFIG --role center|coordinator

CONFIG is a JSON file.  Top-level keys:

    outdir      output directory (default "out")
    data        {"train": path, "test": path, "truth": path}
    simulate    {"kind": "gp" | "slosh", "format": "bin" | "csv", ...generator fields}
    run         RunConfig fields (H, m, sketch, theta, variant, chain, ...)
    federation  {"centers": [{"id", "data", "offset"}], "locations": path,
                 "message_dir": path, "transport": "file" | "tcp",
                 "host": str, "port": int, "timeout": seconds}

Relative paths resolve against the config file's directory.  ``--set
a.b=value`` overrides any key (value parsed as JSON when possible).  Exit
codes: 0 ok, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import socket
import sys
from pathlib import Path

import numpy as np

from .binio import FormatError
from .data import DatasetError, FunctionalDataset, PredictionRequest, load_dataset
from .federation import (CenterShard, ProtocolError, aggregate_partials, center_compute_partial,
                         collect_frames, message_path, read_message, send_to, write_message)
from .kernels import CovarianceError
from .metrics import write_reports
from .pipeline import (ConfigError, RunConfig, build_tasks, collaborative_predictive, combine,
                       config_hash, eval_draws, make_sketches, parameter_coverage, predict_per_sketch,
                       resolve_m, resolve_workers, run_tasks, standardize_globals)
from .predict import PredictiveDraws
from .sampler import SketchedPosterior
from .simgen import SimConfig, SloshConfig, generate, generate_slosh_like, load_truth_csv, write_outputs
from .sketch import apply_sketch, gen_gaussian_sketch, load_sketched, save_sketched

log = logging.getLogger("sketchgp")

USER_ERRORS = (ConfigError, DatasetError, FormatError, ProtocolError, FileNotFoundError,
               json.JSONDecodeError, ValueError)


class MissingArtifact(ConfigError):
    pass


# ------------------------------------------------------------------ config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part!r} is not a section")
        node[parts[-1]] = _parse_value(value)
    return cfg


class Context:
    """Resolved config plus output locations for one command."""

    def __init__(self, path, overrides, workers=None):
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        self.raw = apply_overrides(raw, overrides)
        unknown = sorted(set(self.raw) - {"outdir", "data", "simulate", "run", "federation"})
        if unknown:
            raise ConfigError(f"unknown config section(s): {unknown}")
        self.base = path.resolve().parent
        self.outdir = self.resolve(self.raw.get("outdir", "out"))
        self.hash = config_hash(self.raw)
        self.run = RunConfig.from_dict(self.raw.get("run", {}))
        self.workers = resolve_workers(workers if workers is not None else self.run.workers)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def data_path(self, key: str, required: bool = True) -> Path | None:
        data = self.raw.get("data", {})
        if key not in data:
            if required:
                raise ConfigError(f"config is missing data.{key}")
            return None
        return self.resolve(data[key])

    def load(self, key: str, required: bool = True) -> FunctionalDataset | None:
        path = self.data_path(key, required)
        if path is None:
            return None
        if not path.exists():
            raise MissingArtifact(f"data.{key} not found: {path}")
        return load_dataset(path)

    def datasets(self, need_test: bool = False):
        train = self.load("train")
        test = self.load("test", need_test)
        if self.run.standardize_global:
            (train, test), _ = standardize_globals(train, test)
        return train, test

    def out(self, *parts) -> Path:
        path = self.outdir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path} (run the upstream command first)")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(json.loads(json.dumps(obj, default=_jsonable)), indent=2, sort_keys=True))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------- commands


def cmd_simulate(ctx: Context) -> int:
    sim = dict(ctx.raw.get("simulate", {}))
    kind = sim.pop("kind", "gp")
    fmt = sim.pop("format", "bin")
    if fmt not in ("bin", "csv"):
        raise ConfigError(f"simulate.format must be 'bin' or 'csv', got {fmt!r}")
    if kind == "gp":
        try:
            train, test, truth = generate(SimConfig.from_dict(sim))
        except TypeError as exc:
            raise ConfigError(f"simulate: {exc}") from None
    elif kind == "slosh":
        known = set(SloshConfig.__dataclass_fields__)
        bad = sorted(set(sim) - known)
        if bad:
            raise ConfigError(f"unknown slosh config field(s): {bad}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in sim.items()}
        train, test, truth = generate_slosh_like(SloshConfig(**kw))
    else:
        raise ConfigError(f"simulate.kind must be 'gp' or 'slosh', got {kind!r}")
    paths = write_outputs(train, test, truth, ctx.outdir / "data", fmt)
    _write_json(ctx.out("data", "truth_extra.json"), {"config_hash": ctx.hash, **truth.extra})
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def _posterior_path(ctx: Context, h: int) -> Path:
    return ctx.out("posteriors", f"sketch_{h:03d}.post")


def _finish_fit(ctx: Context, tasks, posts, failures, extra: dict) -> int:
    entries = []
    for post in posts:
        path = _posterior_path(ctx, int(post.sketch_id))
        post.save(path)
        entries.append({"sketch_id": int(post.sketch_id), "path": str(path.relative_to(ctx.outdir)),
                        "theta": post.theta, "power": post.power, "accept_rates": post.accept_rates})
    for t in tasks:
        save_sketched(t.sk, ctx.out("sketched", f"sketch_{t.sketch_id:03d}.skd"))
    manifest = {"config_hash": ctx.hash, "H": len(tasks), "m": tasks[0].phi.m if tasks else None,
                "thetas": [t.kernel.theta for t in tasks], "posteriors": entries,
                "failures": {str(h): msg for h, msg in failures.items()}, **extra}
    _write_json(ctx.out("fit_manifest.json"), manifest)
    print(f"wrote {len(posts)} posterior(s) to {ctx.outdir / 'posteriors'}")
    if failures:
        for h, msg in sorted(failures.items()):
            print(f"sketch {h} failed: {msg}", file=sys.stderr)
        print(f"failed sketches: {sorted(failures)}", file=sys.stderr)
        return 2
    return 0


def cmd_fit(ctx: Context) -> int:
    train, _ = ctx.datasets()
    cfg = ctx.run
    sketches = make_sketches(cfg, train)
    sketched = [apply_sketch(phi, train, h) for h, phi in enumerate(sketches)]
    tasks = build_tasks(cfg, train.locations, sketches, sketched, {"config_hash": ctx.hash})
    log.info("fitting %d chains on %d worker(s)", len(tasks), ctx.workers)
    posts, failures = run_tasks(tasks, ctx.workers)
    return _finish_fit(ctx, tasks, posts, failures, {"sketch": cfg.sketch, "n": train.n})


def _load_posteriors(ctx: Context) -> list[SketchedPosterior]:
    manifest = json.loads(_need(ctx.outdir / "fit_manifest.json", "fit manifest").read_text())
    if manifest.get("failures"):
        raise MissingArtifact(f"fit recorded failed sketches {sorted(manifest['failures'])}; refit first")
    posts = []
    for entry in manifest["posteriors"]:
        posts.append(SketchedPosterior.load(_need(ctx.outdir / entry["path"], "posterior file")))
    if not posts:
        raise MissingArtifact("fit manifest lists no posteriors")
    return posts


def cmd_combine(ctx: Context) -> int:
    posts = _load_posteriors(ctx)
    cp = combine(posts)
    cp.provenance["config_hash"] = ctx.hash
    cp.save(ctx.out("collaborative.bin"))
    tag = {"config_hash": ctx.hash}
    cp.save_csv(ctx.out("collaborative.csv"), tag)
    for name in cp.names:
        values, dens = cp.density(name)
        with open(ctx.out("density", f"{name}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["xi", "value", "density", "config_hash"])
            for x, v, d in zip(cp.grid.xi, values, dens):
                w.writerow([repr(float(x)), repr(float(v)), repr(float(d)), ctx.hash])
    truth_path = ctx.data_path("truth", required=False)
    truth = load_truth_csv(truth_path) if truth_path is not None and truth_path.exists() else {}
    cover = parameter_coverage(cp, truth)
    with open(ctx.out("summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["functional", "median", "ci95_low", "ci95_high", "truth", "covered", "config_hash"])
        for name in cp.names:
            q = cp[name]
            row = [name, q[cp.grid.nearest(0.5)], q[cp.grid.nearest(0.025)], q[cp.grid.nearest(0.975)]]
            c = cover.get(name)
            row += [c["truth"], c["covered"]] if c else ["", ""]
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:4]] + row[4:] + [ctx.hash])
            print(f"{name:<10} {row[1]:>10.4f}  ({row[2]:.4f}, {row[3]:.4f})"
                  + (f"  truth {c['truth']:.4f} {'covered' if c['covered'] else 'MISSED'}" if c else ""))
    return 0


def cmd_predict(ctx: Context) -> int:
    cfg = ctx.run
    train, test = ctx.datasets(need_test=True)
    posts = _load_posteriors(ctx)
    req = PredictionRequest.from_dataset(test, cfg.mode, cfg.within_run)
    req.check_against(train)
    sketches = sketched = None
    if req.mode == "within":
        sketches = make_sketches(cfg, train)
        sketched = [load_sketched(_need(ctx.outdir / "sketched" / f"sketch_{p.sketch_id:03d}.skd",
                                        "sketched data")) for p in posts]
        sketches = [sketches[int(p.sketch_id)] for p in posts]
    per = predict_per_sketch(cfg, posts, req, train.locations, sketches, sketched)
    for p in per:
        p.meta["config_hash"] = ctx.hash
        p.save(ctx.out("predict", f"sketch_{p.sketch_id:03d}.pred"))
    pred = collaborative_predictive(per)
    pred.meta["config_hash"] = ctx.hash
    pred.save(ctx.out("predictive.bin"))
    pred.save_summary_csv(ctx.out("predictive_summary.csv"), {"config_hash": ctx.hash})
    print(f"predicted {pred.draws.shape[1]} coordinates with {pred.draws.shape[0]} draws")
    return 0


def cmd_eval(ctx: Context) -> int:
    cfg = ctx.run
    test = ctx.load("test")
    pred = PredictiveDraws.load(_need(ctx.outdir / "predictive.bin", "collaborative predictive draws"))
    if pred.draws.shape[1] != test.n * test.S:
        raise ConfigError(f"predictive draws have {pred.draws.shape[1]} coordinates, "
                          f"test data has {test.n * test.S}")
    report = eval_draws(cfg, pred, test, cfg.label or cfg.sketch)
    write_reports([report], ctx.out("eval.csv"), {"config_hash": ctx.hash})
    print(report.table())
    return 0


# -------------------------------------------------------------- federation


def _fed(ctx: Context) -> dict:
    fed = ctx.raw.get("federation")
    if not fed or "centers" not in fed:
        raise ConfigError("config has no federation.centers")
    if ctx.run.sketch != "gaussian":
        raise ConfigError("federation needs run.sketch = 'gaussian'")
    return fed


def _fed_n(ctx: Context, fed: dict) -> int:
    if "n" in fed:
        return int(fed["n"])
    locs = fed.get("locations")
    if locs is None:
        raise ConfigError("federation needs 'n' or 'locations'")
    return load_dataset(_need(ctx.resolve(locs), "coordinator locations")).n


def cmd_center(ctx: Context, center_id: int) -> int:
    fed = _fed(ctx)
    entry = next((c for c in fed["centers"] if int(c["id"]) == center_id), None)
    if entry is None:
        raise ConfigError(f"center {center_id} is not listed in federation.centers")
    ds = load_dataset(_need(ctx.resolve(entry["data"]), f"center {center_id} data"))
    n = _fed_n(ctx, fed)
    m = resolve_m(ctx.run.m, n, ctx.run.m_min)
    shard = CenterShard(center_id, ds.locations, ds.local_attrs, ds.responses, int(entry["offset"]))
    msgs = [center_compute_partial(shard, m, n, ctx.run.seed + h, h) for h in range(int(ctx.run.H))]
    if fed.get("transport", "file") == "tcp":
        send_to(fed.get("host", "127.0.0.1"), int(fed["port"]), msgs)
        print(f"center {center_id}: sent {len(msgs)} message(s)")
    else:
        outdir = ctx.resolve(fed.get("message_dir", ctx.outdir / "messages"))
        outdir.mkdir(parents=True, exist_ok=True)
        for msg in msgs:
            write_message(msg, message_path(outdir, center_id, msg.sketch_id))
        print(f"center {center_id}: wrote {len(msgs)} message(s) to {outdir}")
    return 0


def cmd_coordinator(ctx: Context) -> int:
    fed = _fed(ctx)
    cfg = ctx.run
    if "locations" not in fed:
        raise ConfigError("coordinator needs federation.locations (locations and global attributes)")
    ref = load_dataset(_need(ctx.resolve(fed["locations"]), "coordinator locations"))
    ids = sorted(int(c["id"]) for c in fed["centers"])
    H = int(cfg.H)
    m = resolve_m(cfg.m, ref.n, cfg.m_min)
    by_h: dict[int, list] = {h: [] for h in range(H)}
    if fed.get("transport", "file") == "tcp":
        with socket.create_server((fed.get("host", "127.0.0.1"), int(fed["port"]))) as server:
            try:
                frames = collect_frames(server, len(ids) * H, float(fed.get("timeout", 60.0)))
            except socket.timeout:
                raise ProtocolError("timed out waiting for center messages") from None
        for msg in frames:
            by_h.setdefault(msg.sketch_id, []).append(msg)
    else:
        mdir = ctx.resolve(fed.get("message_dir", ctx.outdir / "messages"))
        for h in range(H):
            for cid in ids:
                path = message_path(mdir, cid, h)
                if not path.exists():
                    raise ProtocolError(f"missing message from center {cid} for sketch {h}: {path}")
                by_h[h].append(read_message(path))
    z = ref.global_attrs
    if cfg.standardize_global:
        (ref,), _ = standardize_globals(ref)
        z = ref.global_attrs
    sketched = [aggregate_partials(by_h[h], z, ids, ref.n) for h in range(H)]
    sketches = [gen_gaussian_sketch(m, ref.n, cfg.seed + h) for h in range(H)]
    tasks = build_tasks(cfg, ref.locations, sketches, sketched, {"config_hash": ctx.hash, "federated": True})
    posts, failures = run_tasks(tasks, ctx.workers)
    return _finish_fit(ctx, tasks, posts, failures, {"sketch": "gaussian", "n": ref.n, "centers": ids})


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchgp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "fit", "combine", "predict", "eval", "federate"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. run.H=4")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: run.workers, then $SKETCHGP_WORKERS, then CPU count)")
        if name == "federate":
            p.add_argument("--role", choices=("center", "coordinator"), required=True)
            p.add_argument("--center-id", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        ctx = Context(args.config, args.set, args.workers)
        if args.command == "federate":
            if args.role == "center":
                if args.center_id is None:
                    raise ConfigError("--role center needs --center-id")
                return cmd_center(ctx, args.center_id)
            return cmd_coordinator(ctx)
        return {"simulate": cmd_simulate, "fit": cmd_fit, "combine": cmd_combine,
                "predict": cmd_predict, "eval": cmd_eval}[args.command](ctx)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CovarianceError, MemoryError, RuntimeError) as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last resort
        log.exception("unexpected failure")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
