"""Command-line pipeline: embed, attack, verify, detect, eliminate, equiv, report.

Every command is pure with respect to its inputs (input model directories are
never mutated) and deterministic under a fixed --seed, so reruns produce
byte-identical artifacts. NEUROFUSCATE_SEED serves as the fallback seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path


from . import defense, ir, obfuscate, watermark as wm
from .inference import equivalence_check
from .verify import verify as run_verify


@dataclass(frozen=True)
class ExperimentConfig:
    """One report-sweep run: model + scheme + message + attack grid."""

    model_path: Path
    key_path: Path
    message: wm.BitString
    alphas: tuple[float, ...]
    mix: tuple[float, float, float]
    theta: float | None
    seeds: tuple[int, ...]
    camouflage: bool
    out_dir: Path


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("NEUROFUSCATE_SEED")
    return int(env) if env else 0


def _parse_mix(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(":")]
    if len(parts) != 3:
        raise ValueError("mix must be zero:clique:split")
    total = sum(parts)
    if total <= 0:
        raise ValueError("mix weights must not all be zero")
    return tuple(p / total for p in parts)


def _message(args) -> wm.BitString:
    if args.message is not None:
        return wm.BitString.from_text(args.message)
    if args.random_bits is not None:
        return wm.BitString.random(args.random_bits, seed=_seed(args))
    raise ValueError("provide --message TEXT or --random-bits N")


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _attack_config(args, seed: int) -> obfuscate.ObfuscationConfig:
    camo = not args.no_camouflage
    return obfuscate.ObfuscationConfig(
        alpha=args.alpha,
        mix=_parse_mix(args.mix),
        enable_permutation=camo,
        enable_rescaling=camo,
        enable_kernel_expansion=args.kernel_expand,
        zero_side=args.zero_side,
        seed=seed,
    )


def cmd_embed(args) -> int:
    model = ir.load(args.model)
    message = _message(args)
    out = Path(args.out)
    targets = (args.target_layer,) if args.target_layer is not None else None
    marked, key = wm.embed(
        model, args.scheme, message, seed=_seed(args), target_layer_ids=targets, eta=args.eta
    )
    ir.save(marked, out / "model")
    key.save(out / "key")
    _write_json(
        out / "embed.json",
        {
            "scheme": args.scheme,
            "bits": len(message),
            "message": message.to01(),
            "target_layer_ids": list(key.target_layer_ids),
            "seed": _seed(args),
        },
    )
    print(f"embedded {len(message)} bits via {args.scheme} -> {out}")
    return 0


def cmd_attack(args) -> int:
    model = ir.load(args.model)
    out = Path(args.out)
    seed = _seed(args)
    if args.alpha == 0.0:
        ir.save(model, out / "model")
        _write_json(out / "plan.json", {"alpha": 0.0, "groups": [], "note": "no-op attack"})
        print(f"alpha=0: copied model unchanged -> {out}")
        return 0
    attacked, plan = obfuscate.inject_campaign(model, _attack_config(args, seed))
    ir.save(attacked, out / "model")
    (out / "plan.json").write_text(plan.to_json() + "\n")
    grown = sum(g.d for g in plan.groups)
    print(f"injected {grown} dummy neurons at alpha={args.alpha} -> {out}")
    return 0


def cmd_verify(args) -> int:
    model = ir.load(args.model)
    key = wm.WatermarkKey.load(args.key)
    message = _message(args)
    reference = ir.load(args.reference) if args.reference else None
    report = run_verify(model, key, message, theta=args.theta, reference=reference)
    payload = report.to_json_dict()
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_detect(args) -> int:
    model = ir.load(args.model)
    plan = None
    if args.plan:
        plan = obfuscate.ObfuscationPlan.from_json(Path(args.plan).read_text())
    report = defense.detection_report(model, args.method, plan=plan, seed=_seed(args))
    payload = report.to_json_dict()
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_eliminate(args) -> int:
    model = ir.load(args.model)
    out = Path(args.out)
    if args.reference:
        reference = ir.load(args.reference)
        result, log = defense.recover_with_reference(model, reference)
        ir.save(result.model, out / "model")
        _write_json(
            out / "recovery.json",
            {
                "recovered": result.recovered,
                "ambiguities": list(result.ambiguities),
                "note": result.note,
                "elimination_log": log,
            },
        )
        print(f"recovered={result.recovered} -> {out}")
        return 0
    cleaned, log = defense.eliminate_dummy(model)
    ir.save(cleaned, out / "model")
    _write_json(out / "elimination.json", {"log": log})
    removed = sum(len(e["removed"]) for e in log)
    print(f"eliminated {removed} neurons -> {out}")
    return 0


def cmd_equiv(args) -> int:
    a = ir.load(args.model)
    b = ir.load(args.model_b)
    rep = equivalence_check(a, b, n_samples=args.samples, seed=_seed(args), tol=args.tol)
    payload = {
        "max_abs_dev": rep.max_abs_dev,
        "passed": rep.passed,
        "tol": rep.tol,
        "n_samples": rep.n_samples,
    }
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0 if rep.passed else 3


def cmd_report(args) -> int:
    cfg = ExperimentConfig(
        model_path=Path(args.model),
        key_path=Path(args.key),
        message=_message(args),
        alphas=tuple(float(a) for a in args.alphas.split(",")),
        mix=_parse_mix(args.mix),
        theta=args.theta,
        seeds=tuple(range(_seed(args), _seed(args) + args.n_seeds)),
        camouflage=not args.no_camouflage,
        out_dir=Path(args.out),
    )
    model = ir.load(cfg.model_path)
    key = wm.WatermarkKey.load(cfg.key_path)

    primitives = {"zero": (1.0, 0.0, 0.0), "clique": (0.0, 1.0, 0.0), "split": (0.0, 0.0, 1.0)}
    rows = []
    for name, mix in primitives.items():
        if cfg.mix[("zero", "clique", "split").index(name)] == 0.0:
            continue
        for alpha in cfg.alphas:
            for seed in cfg.seeds:
                attack_cfg = obfuscate.ObfuscationConfig(
                    alpha=alpha,
                    mix=mix,
                    enable_permutation=cfg.camouflage,
                    enable_rescaling=cfg.camouflage,
                    seed=seed,
                )
                attacked, _ = obfuscate.inject_campaign(model, attack_cfg)
                rep = run_verify(
                    attacked, key, cfg.message, theta=cfg.theta, reference=model
                )
                rows.append(
                    {
                        "primitive": name,
                        "alpha": alpha,
                        "seed": seed,
                        "raw_ber": rep.raw_ber,
                        "scaled_ber": rep.scaled_ber,
                        "decision": rep.decision,
                        "utility_delta": rep.utility_delta,
                        "neurons_removed_by_handling": rep.neurons_removed_by_handling,
                    }
                )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out_dir / "sweep.json", {"scheme": key.scheme, "rows": rows})
    header = "primitive,alpha,seed,raw_ber,scaled_ber,decision,utility_delta"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['primitive']},{r['alpha']},{r['seed']},{r['raw_ber']},"
            f"{r['scaled_ber']},{r['decision']},{r['utility_delta']}"
        )
    (cfg.out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(rows)} sweep points -> {cfg.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurofuscate",
        description="Dummy-neuron structural obfuscation attacks and defenses "
        "for white-box neural network watermarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--model", required=True, help="input model directory")
        p.add_argument("--seed", type=int, default=None,
                       help="rng seed (fallback: NEUROFUSCATE_SEED, then 0)")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("embed", help="embed a watermark")
    common(p)
    p.add_argument("--scheme", required=True, choices=wm.SCHEMES)
    p.add_argument("--message", default=None, help="text message to embed")
    p.add_argument("--random-bits", type=int, default=None, help="embed N seeded random bits")
    p.add_argument("--target-layer", type=int, default=None)
    p.add_argument("--eta", type=float, default=0.5)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("attack", help="inject dummy neurons")
    common(p)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--mix", default="0:0.5:0.5", help="zero:clique:split weights")
    p.add_argument("--no-camouflage", action="store_true",
                   help="disable rescaling and permutation")
    p.add_argument("--kernel-expand", action="store_true")
    p.add_argument("--zero-side", default="mixed", choices=("incoming", "outgoing", "mixed"))
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify", help="extract and judge a watermark")
    common(p, out_required=False)
    p.add_argument("--key", required=True)
    p.add_argument("--message", default=None)
    p.add_argument("--random-bits", type=int, default=None)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--reference", default=None, help="pre-attack model for utility delta")
    p.add_argument("--out", default=None, help="verdict JSON path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("detect", help="flag suspected dummy neurons")
    common(p, out_required=False)
    p.add_argument("--method", required=True, choices=("cluster", "svd"))
    p.add_argument("--plan", default=None, help="ground-truth plan JSON for rates")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eliminate", help="merge and remove dummy neurons")
    common(p)
    p.add_argument("--reference", default=None,
                   help="original model: also recover order and scale")
    p.set_defaults(func=cmd_eliminate)

    p = sub.add_parser("equiv", help="sampled functional equivalence of two models")
    common(p, out_required=False)
    p.add_argument("--model-b", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("report", help="scaled-BER-vs-alpha sweep (JSON + CSV)")
    common(p)
    p.add_argument("--key", required=True)
    p.add_argument("--message", default=None)
    p.add_argument("--random-bits", type=int, default=None)
    p.add_argument("--alphas", default="0.01,0.05,0.1,0.2,0.5")
    p.add_argument("--mix", default="1:1:1", help="primitives to sweep (nonzero weights)")
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--no-camouflage", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ir.ModelError, wm.WatermarkError, ValueError, OSError) as err:
        print(
            json.dumps({"error": type(err).__name__, "detail": str(err)}, sort_keys=True),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
