"""Command-line entry point: ``seqmark allocate|embed|attack|detect|experiment|generate``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .allocation import allocation_chain, solve_allocation
from .core import CountHistogram, SharingLedger, record_sharing
from .detector import detect_combination, detect_single, extract_leak_pattern, partial_leak_candidates
from .embedder import CorrelationModel, embed_correlated, embed_uncorrelated

ATTACK_SCENARIOS = {
    "collusion": "collusion",
    "partial": "partial_knowledge",
    "correlation": "correlation",
    "combined": "combined",
}


def _config_doc(args) -> dict:
    return json.loads(Path(args.config).read_text()) if args.config else {}


def _pick(args, doc, name, default=None):
    v = getattr(args, name, None)
    return v if v is not None else doc.get(name, default)


def _write(out, text: str) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _ratio_w(args, doc, length):
    w = _pick(args, doc, "w")
    if w is None:
        r = _pick(args, doc, "r")
        if r is None:
            raise ValueError("give --w or --r")
        w = harness.watermark_length(length, float(r))
    return int(w)


def cmd_allocate(args) -> None:
    doc = _config_doc(args)
    ledger_path = _pick(args, doc, "ledger")
    hist = _pick(args, doc, "hist")
    if hist is not None:
        n = [int(v) for v in hist.split(",")] if isinstance(hist, str) else [int(v) for v in hist]
        hist = CountHistogram(tuple(n))
        sols = [solve_allocation(hist, _ratio_w(args, doc, hist.length))]
    elif ledger_path:
        ledger = SharingLedger.load(ledger_path)
        w = _ratio_w(args, doc, ledger.length)
        sols = [solve_allocation(ledger.counts(), w)]
    else:
        length = int(_pick(args, doc, "length", 7690))
        w = _ratio_w(args, doc, length)
        sols = allocation_chain(length, w, int(_pick(args, doc, "h", 1)))
    body = [{"sharing": k + 1, **s.to_json()} for k, s in enumerate(sols)]
    _write(args.out, json.dumps(body if len(body) > 1 else body[0], indent=2) + "\n")


def cmd_embed(args) -> None:
    doc = _config_doc(args)
    m = int(_pick(args, doc, "m", 3))
    data = harness.load_matrix(_pick(args, doc, "data"), m)
    row = int(_pick(args, doc, "row", 0))
    base = data[row]
    ledger_path = _pick(args, doc, "ledger")
    ledger = SharingLedger.load(ledger_path) if ledger_path and Path(ledger_path).exists() else SharingLedger(base)
    if ledger.base != base:
        raise ValueError(f"ledger base differs from row {row} of the data file")
    sp = _pick(args, doc, "sp_id") or f"sp{ledger.h + 1:02d}"
    w = _ratio_w(args, doc, ledger.length)
    alloc = solve_allocation(ledger.counts(), w)
    everything = range(ledger.length)
    model_path = _pick(args, doc, "model")
    if model_path:
        _, pattern = embed_correlated(ledger, everything, alloc, CorrelationModel.load(model_path), w, sp_id=sp)
    else:
        _, pattern = embed_uncorrelated(ledger, everything, alloc, rng_seed=args.seed, sp_id=sp)
    record_sharing(ledger, sp, everything, pattern)
    if ledger_path:
        ledger.save(ledger_path)
    released = ledger.released(sp)
    if args.out:
        harness.save_matrix(args.out, [released])
    else:
        sys.stdout.write(",".join(map(str, released.points)) + "\n")


def _run(args, doc: dict, scenario: str | None = None) -> None:
    overrides = {k: getattr(args, k, None) for k in ("trials", "seed", "h", "t", "r", "pi", "length")}
    if scenario:
        doc = {**doc, "scenario": scenario}
    if getattr(args, "fraction", None):
        overrides["fractions"] = args.fraction
    cfg = harness.ExperimentConfig.from_json(doc, **overrides)
    agg, per_trial = harness.run_experiment(cfg, per_trial=True)
    if args.out:
        harness.emit_results(agg, args.out)
        if args.trials_out:
            harness.emit_results(per_trial, args.trials_out)
        if getattr(args, "long", None):
            metrics = [c for c in agg.columns if c not in harness.PARAMS and c not in ("r", "n", "fraction", "t")]
            x = "fraction" if "fraction" in agg.columns else "t" if "t" in agg.columns else "h"
            harness.emit_results(agg, args.out, args.long, x=x, y=metrics, series="r")
    else:
        sys.stdout.write(agg.to_csv())


def cmd_attack(args) -> None:
    _run(args, _config_doc(args), ATTACK_SCENARIOS[args.kind])


def cmd_experiment(args) -> None:
    if not args.config:
        raise ValueError("experiment needs --config")
    _run(args, _config_doc(args))


def cmd_detect(args) -> None:
    doc = _config_doc(args)
    ledger = SharingLedger.load(_pick(args, doc, "ledger"))
    leak = harness.load_matrix(_pick(args, doc, "leak"), ledger.base.m)[0]
    covered_path = _pick(args, doc, "covered")
    truth = _pick(args, doc, "truth")
    truth = set(truth.split(",")) if isinstance(truth, str) else set(truth) if truth else None
    if covered_path:
        covered = [int(v) for v in Path(covered_path).read_text().replace(",", " ").split()]
        if len(covered) != len(leak):
            raise ValueError(f"{len(covered)} covered indices for a leak of {len(leak)} values")
        report = partial_leak_candidates(dict(zip(covered, leak.points)), ledger, truth=truth)
    else:
        zalpha = extract_leak_pattern(leak, ledger.base)
        phi_hat = int(_pick(args, doc, "phi_hat", 1))
        report = (detect_single(zalpha, ledger, truth=truth) if phi_hat == 1
                  else detect_combination(zalpha, ledger, phi_hat, truth=truth))
    sys.stdout.write(json.dumps(report.to_json(), indent=2) + "\n")
    if args.out:
        row = {"suspects": ";".join(sorted(report.suspects)), "entropy_bits": report.entropy_bits,
               "precision": report.precision, "recall": report.recall, "flags": ";".join(report.flags)}
        harness.emit_results(harness.ResultTable(list(row), [row]), args.out)


def cmd_generate(args) -> None:
    doc = _config_doc(args)
    length = int(_pick(args, doc, "length", 100))
    m = int(_pick(args, doc, "m", 3))
    spec_path = _pick(args, doc, "spec")
    if spec_path:
        spec = [tuple(e) if isinstance(e, list) else (e["i"], e["a"], e["j"], e["b"], e["p"])
                for e in json.loads(Path(spec_path).read_text())]
    else:
        spec = harness.pair_block_spec(length, m, float(_pick(args, doc, "p", 0.96)),
                                       int(_pick(args, doc, "block", 2)))
    records = harness.generate_synthetic(length, m, int(_pick(args, doc, "records", 1000)), spec, args.seed)
    if not args.out:
        raise ValueError("generate needs --out")
    harness.save_matrix(args.out, records)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqmark", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", help="JSON file; flags given on the command line win")
        p.add_argument("--out", help="output file (stdout when omitted)")
        return p

    p = common(sub.add_parser("allocate", help="solve the next allocation or an iterated chain"))
    p.add_argument("--hist", help="comma-separated bucket counts n_0,...,n_h")
    p.add_argument("--ledger")
    p.add_argument("--length", type=int)
    p.add_argument("--w", type=int)
    p.add_argument("--r", type=float)
    p.add_argument("--h", type=int, help="number of sharings to plan from scratch")
    p.set_defaults(func=cmd_allocate)

    p = common(sub.add_parser("embed", help="watermark one record for a new SP and update the ledger"))
    p.add_argument("--data")
    p.add_argument("--row", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--ledger")
    p.add_argument("--sp-id", dest="sp_id")
    p.add_argument("--w", type=int)
    p.add_argument("--r", type=float)
    p.add_argument("--model", help="correlation model JSON; enables correlation-aware placement")
    p.set_defaults(func=cmd_embed)

    for name, func, hlp in (("attack", cmd_attack, "run a seeded attack campaign"),
                            ("experiment", cmd_experiment, "run a campaign described by --config")):
        p = common(sub.add_parser(name, help=hlp))
        if name == "attack":
            p.add_argument("--kind", choices=sorted(ATTACK_SCENARIOS), required=True)
        for flag, typ in (("--trials", int), ("--h", int), ("--t", int), ("--r", float), ("--pi", float),
                          ("--length", int)):
            p.add_argument(flag, type=typ)
        p.add_argument("--fraction", type=float, action="append")
        p.add_argument("--trials-out", dest="trials_out", help="per-trial CSV")
        p.add_argument("--long", help="plot-ready long-format CSV")
        p.set_defaults(func=func)

    p = common(sub.add_parser("detect", help="attribute a leaked record"))
    p.add_argument("--leak")
    p.add_argument("--ledger")
    p.add_argument("--covered", help="positions of a partial leak, one per leaked value")
    p.add_argument("--phi-hat", dest="phi_hat", type=int)
    p.add_argument("--truth", help="comma-separated malicious sp_ids for scoring")
    p.set_defaults(func=cmd_detect)

    p = common(sub.add_parser("generate", help="write a synthetic correlated corpus"))
    p.add_argument("--length", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--records", type=int)
    p.add_argument("--spec", help="JSON list of [i, a, j, b, p] entries")
    p.add_argument("--p", type=float)
    p.add_argument("--block", type=int)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # reported as one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
