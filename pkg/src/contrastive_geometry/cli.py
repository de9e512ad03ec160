"""Command-line front end.

Subcommands: metrics, match, transport, correlate, optimize. Every report
embeds the command, library version, full config, seed and SHA-256 digests of
the inputs. Exit status is 0 only if every requested computation succeeded.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .correlation import TASK_COLUMNS, correlate_models, fixture_path, load_records, parse_filter
from .errors import ContrastiveGeometryError, InvalidInputError
from .features import (
    ViewPairBatch,
    FeatureMap,
    decode_dclf,
    encode_dclf,
    l2_normalize,
    pool_instances,
    zero_columns,
)
from .losses import (
    LossConfig,
    alignment_loss,
    dense_info_nce,
    instance_info_nce,
    uniformity_loss,
)
from .matching import match, transport_plans
from .optimizer import DEFAULT_NOISE, init_random, run

OUTPUT_DIR_ENV = "CONTRASTIVE_GEOMETRY_OUTPUT_DIR"
MATCHING = {"index": "index_wise", "cosine": "cosine_argmax", "ot": "optimal_transport"}
ALIGNMENT = {"neg-cosine": "neg_cosine", "sq-distance": "sq_distance"}
SCOPE = {"all-pairs": "inter_instance_all_pairs", "literal": "positive_pairs_literal"}
DEFAULT_FORMAT = {"metrics": "json", "match": "csv", "transport": "json", "correlate": "json", "optimize": "csv"}
INLINE_PLAN_LIMIT = 64


class CommandFailed(Exception):
    """Raised when some items failed; carries the partial report."""

    def __init__(self, report, failures):
        super().__init__(f"{len(failures)} item(s) failed")
        self.report = report
        self.failures = failures


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def dump_csv(meta: dict, header, rows) -> str:
    """CSV with a single ``# {json}`` provenance line, LF endings, repr floats."""
    buf = io.StringIO(newline="")
    buf.write("# " + json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def parse_csv_report(text: str) -> tuple:
    """Inverse of :func:`dump_csv`: ``(meta, header, rows)`` with numbers restored."""
    first, _, body = text.partition("\n")
    if not first.startswith("# "):
        raise InvalidInputError("CSV report lacks its provenance line")
    meta = json.loads(first[2:])
    reader = csv.reader(io.StringIO(body))
    header = next(reader)
    rows = []
    for row in reader:
        out = []
        for cell in row:
            try:
                out.append(int(cell))
            except ValueError:
                try:
                    out.append(float(cell))
                except ValueError:
                    out.append(cell)
        rows.append(out)
    return meta, header, rows


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def loss_config(args) -> LossConfig:
    return LossConfig(
        temperature=args.temperature,
        kernel_t=args.kernel_t,
        include_positive_in_denominator=args.include_positive,
        alignment_convention=ALIGNMENT[args.alignment],
        uniformity_scope=SCOPE[args.uniformity_scope],
        pair_subsample=args.pair_subsample,
        seed=args.seed,
    )


def _config_echo(args) -> dict:
    skip = {"func", "output", "format"}
    echo = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return echo


def _provenance(args, inputs) -> dict:
    return {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "config": _config_echo(args),
        "inputs": inputs,
    }


def _read_dump(path: str) -> tuple:
    data = Path(path).read_bytes()
    try:
        arr = decode_dclf(data)
    except ContrastiveGeometryError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
    return arr, {"path": path, "sha256": _digest(data), "shape": list(arr.shape)}


def _single_input(args) -> str:
    if not args.input or len(args.input) != 1:
        raise InvalidInputError(f"{args.command} takes exactly one --input")
    return args.input[0]


# ---------------------------------------------------------------------------
# commands

def _metrics_for(arr: np.ndarray, args, cfg: LossConfig, wanted: set) -> dict:
    n, v = arr.shape[:2]
    if "la" in wanted and v < 2:
        raise InvalidInputError("missing view: alignment needs a V = 2 dump, this one has V = 1")
    out: dict = {"dense": {}, "instance": {}}
    if v >= 2:
        batch = l2_normalize(ViewPairBatch(arr[:, :2]))
        out["zero_columns"] = int(zero_columns(batch).size)
        pooled = np.stack([pool_instances(batch.view(k)) for k in range(2)], axis=1)
        inst = l2_normalize(ViewPairBatch(pooled[:, :, :, None, None]))
        if "la" in wanted:
            for conv in ("sq_distance", "neg_cosine"):
                c = replace(cfg, alignment_convention=conv)
                out["dense"][f"l_a_{conv}"] = alignment_loss(batch, c)
                out["instance"][f"l_a_{conv}"] = alignment_loss(inst, c)
        if "lu" in wanted:
            out["dense"]["l_u"] = uniformity_loss(batch, cfg)
            out["instance"]["l_u"] = uniformity_loss(inst, cfg)
        if "nce" in wanted:
            pairs = match(batch, MATCHING[args.matching], args.reg, args.iters)
            out["dense"]["dense_info_nce"] = dense_info_nce(batch, pairs, cfg).to_dict()
            out["dense"]["matching"] = pairs.strategy
            out["instance"]["instance_info_nce"] = instance_info_nce(inst, cfg).to_dict()
    else:
        maps = [l2_normalize(FeatureMap(arr[i, 0])) for i in range(n)]
        out["zero_columns"] = int(sum(zero_columns(m).size for m in maps))
        if "nce" in wanted:
            raise InvalidInputError("missing view: InfoNCE needs a V = 2 dump, this one has V = 1")
        if "lu" in wanted:
            if cfg.uniformity_scope == "positive_pairs_literal":
                raise InvalidInputError("missing view: literal uniformity scope needs a V = 2 dump")
            out["dense"]["l_u"] = uniformity_loss(maps, cfg)
            pooled = pool_instances(maps)
            out["instance"]["l_u"] = uniformity_loss(pooled[:, None, :], cfg)
    return out


def cmd_metrics(args) -> tuple:
    cfg = loss_config(args)
    explicit = args.metrics is not None
    items, inputs, failures = [], [], []
    for path in args.input or []:
        try:
            arr, info = _read_dump(path)
            inputs.append(info)
            wanted = set(args.metrics.split(",")) if explicit else (
                {"la", "lu", "nce"} if arr.shape[1] >= 2 else {"lu"})
            unknown = wanted - {"la", "lu", "nce"}
            if unknown:
                raise InvalidInputError(f"unknown metrics {sorted(unknown)}; choose from la, lu, nce")
            items.append({"input": path, "result": _metrics_for(arr, args, cfg, wanted)})
        except (ContrastiveGeometryError, OSError) as exc:
            failures.append(f"{path}: {exc}")
            items.append({"input": path, "error": str(exc)})
    if not items:
        raise InvalidInputError("metrics needs at least one --input")
    report = {**_provenance(args, inputs), "loss_config": cfg.to_dict(), "results": items}
    if args.format == "csv":
        rows = []
        for item in items:
            if "error" in item:
                rows.append([item["input"], "error", "", item["error"]])
                continue
            for level in ("dense", "instance"):
                for key, val in sorted(item["result"][level].items()):
                    if isinstance(val, dict):
                        for sub, sval in sorted(val.items()):
                            rows.append([item["input"], level, f"{key}.{sub}", sval])
                    else:
                        rows.append([item["input"], level, key, val])
        text = dump_csv(_provenance(args, inputs), ["input", "level", "metric", "value"], rows)
    else:
        text = dump_json(report)
    if failures:
        raise CommandFailed(text, failures)
    return text, None


def cmd_match(args) -> tuple:
    path = _single_input(args)
    arr, info = _read_dump(path)
    batch = l2_normalize(ViewPairBatch(arr) if arr.shape[1] == 2 else _missing_view(path))
    pairs = match(batch, MATCHING[args.matching], args.reg, args.iters)
    meta = {**_provenance(args, [info]), "strategy": pairs.strategy,
            "negative_policy": {
                "exclude_own_view": pairs.negative_policy.exclude_own_view,
                "partner_view": pairs.negative_policy.partner_view,
                "cross_instance": pairs.negative_policy.cross_instance,
            },
            "counts": pairs.counts()}
    if args.format == "json":
        return dump_json({**meta, "positives": [list(t) for t in pairs.positives()]}), None
    return dump_csv(meta, ["i", "p", "q"], pairs.positives()), None


def _missing_view(path):
    raise InvalidInputError(f"{path}: matching needs a V = 2 dump")


def cmd_transport(args) -> tuple:
    path = _single_input(args)
    arr, info = _read_dump(path)
    if arr.shape[1] != 2:
        _missing_view(path)
    batch = l2_normalize(ViewPairBatch(arr))
    plans = transport_plans(batch, args.reg, args.iters)
    entries = []
    for i, tp in enumerate(plans):
        entry = tp.to_dict(inline_limit=INLINE_PLAN_LIMIT)
        entry["instance"] = i
        entries.append(entry)
    sidecar = None
    report = {**_provenance(args, [info]), "reg": args.reg, "iterations": args.iters, "plans": entries}
    if batch.hw > INLINE_PLAN_LIMIT:
        stack = np.stack([tp.plan for tp in plans])[:, None, None, :, :]
        payload = encode_dclf(stack)
        report["plan_sidecar"] = {"layout": "DCLF (N, 1, 1, HW, HW)", "sha256": _digest(payload)}
        sidecar = payload
    if args.format == "csv":
        rows = [[e["instance"], e["ot_distance"], e["marginal_residual"], e["iterations_run"]] for e in entries]
        text = dump_csv(_provenance(args, [info]), ["instance", "ot_distance", "marginal_residual", "iterations_run"], rows)
    else:
        text = dump_json(report)
    return text, sidecar


def _resolve_records(spec: str) -> Path:
    if spec.startswith("fixture:"):
        return fixture_path(spec.split(":", 1)[1])
    return Path(spec)


def cmd_correlate(args) -> tuple:
    if not args.records:
        raise InvalidInputError("correlate needs --records PATH (or fixture:NAME)")
    path = _resolve_records(args.records)
    data = path.read_bytes()
    records = load_records(path, args.task)
    if args.filter:
        keep = parse_filter(args.filter)
        records = [r for r in records if keep(r)]
    report = correlate_models(records, args.task)
    info = {"path": args.records, "sha256": _digest(data), "records": len(records)}
    body = report.to_dict()
    if args.format == "csv":
        rows = [[p["id"], p["x"], p["y"]] for p in body["points"]]
        meta = {**_provenance(args, [info]), **{k: v for k, v in body.items() if k != "points"}}
        return dump_csv(meta, ["id", "x", "y"], rows), None
    return dump_json({**_provenance(args, [info]), **body}), None


def cmd_optimize(args) -> tuple:
    cfg = loss_config(args)
    state = init_random(args.n, args.hw, args.dim, seed=args.seed, lr=args.lr, noise=args.noise)
    final = run(state, args.steps, args.w_a, args.w_u, args.w_c, cfg, contrastive=args.contrastive)
    meta = {**_provenance(args, []), "final_mean_positive_cosine": final.mean_positive_cosine()}
    if args.format == "json":
        hist = [{"step": s, "l_a": la, "l_u": lu, "loss": loss} for s, la, lu, loss in final.history]
        return dump_json({**meta, "history": hist}), None
    return dump_csv(meta, ["step", "l_a", "l_u", "loss"], final.history), None


COMMANDS = {
    "metrics": cmd_metrics,
    "match": cmd_match,
    "transport": cmd_transport,
    "correlate": cmd_correlate,
    "optimize": cmd_optimize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrastive-geometry", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", action="append", metavar="PATH", help="DCLF dump (repeatable)")
    common.add_argument("--records", metavar="PATH", help="model records CSV/JSON, or fixture:NAME")
    common.add_argument("--output", metavar="PATH", help="report path (default: stdout or $%s)" % OUTPUT_DIR_ENV)
    common.add_argument("--format", choices=("json", "csv"))
    common.add_argument("--temperature", type=float, default=0.19)
    common.add_argument("--kernel-t", type=float, default=2.0)
    common.add_argument("--alignment", choices=sorted(ALIGNMENT), default="neg-cosine")
    common.add_argument("--uniformity-scope", choices=sorted(SCOPE), default="all-pairs")
    common.add_argument("--include-positive", type=_bool, default=None, metavar="BOOL")
    common.add_argument("--matching", choices=sorted(MATCHING), default="index")
    common.add_argument("--reg", type=float, default=0.1)
    common.add_argument("--iters", type=int, default=10)
    common.add_argument("--pair-subsample", type=int, default=100_000)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--filter", metavar="EXPR", help="tag filter, e.g. 'w_c = 0'")

    p = sub.add_parser("metrics", parents=[common], help="L_a, L_u and InfoNCE of feature dumps")
    p.add_argument("--metrics", metavar="LIST", help="comma list of la,lu,nce (default: all available)")
    sub.add_parser("match", parents=[common], help="positive pairs for one dump")
    sub.add_parser("transport", parents=[common], help="Sinkhorn plans between the two views")
    p = sub.add_parser("correlate", parents=[common], help="Kendall tau of model records")
    p.add_argument("--task", choices=sorted(TASK_COLUMNS), default="acc")
    p = sub.add_parser("optimize", parents=[common], help="projected gradient descent on free embeddings")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--hw", type=int, default=1)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--w-a", type=float, default=0.5)
    p.add_argument("--w-u", type=float, default=1.0)
    p.add_argument("--w-c", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    p.add_argument("--contrastive", choices=("dense", "instance"), default="dense")
    return parser


def _output_path(args) -> Optional[Path]:
    if args.output:
        return Path(args.output)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env) / f"{args.command}.{args.format}"
    return None


def _emit(args, text: str, sidecar: Optional[bytes]) -> None:
    out = _output_path(args)
    if sidecar is not None and out is None:
        raise InvalidInputError("plans larger than the inline limit need --output for the binary sidecar")
    if out is None:
        sys.stdout.write(text)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    if sidecar is not None:
        out.with_name(out.name + ".plans.dclf").write_bytes(sidecar)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.format = args.format or DEFAULT_FORMAT[args.command]
    try:
        text, sidecar = COMMANDS[args.command](args)
        _emit(args, text, sidecar)
    except CommandFailed as exc:
        _emit(args, exc.report, None)
        for item in exc.failures:
            print(f"error: {item}", file=sys.stderr)
        return 1
    except (ContrastiveGeometryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
