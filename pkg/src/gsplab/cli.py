"""Command-line front end.

Subcommands: golden, train, evaluate, pareto, transition, audit,
gen-world.  Every command echoes its fully-resolved configuration and
seed before running, and drops its outputs plus a manifest of file
hashes under --out.

Exit codes: 0 success, 1 validation error, 2 runtime failure,
3 golden-test mismatch.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import configparser
import dataclasses
import hashlib
import sys
from pathlib import Path

import numpy as np

from gsplab.audit import (
    AuditConfig,
    i_sic,
    monotonicity_metric,
    payment_error_rate,
    single_slot_world,
)
from gsplab.auction import (
    FEATURE_DIM,
    AdCandidate,
    AuctionRequest,
    DeepGspMechanism,
    FixedScoreMechanism,
    GspMechanism,
    UgspMechanism,
    run_auction,
)
from gsplab.nets import BidMultiplierNet
from gsplab.simulator import (
    World,
    WorldConfig,
    load_world_config,
    save_world_config,
    scalarize,
)
from gsplab.trainer import TrainConfig, train, write_report_csv

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_GOLDEN_MISMATCH = 3


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config plumbing


def _parse_train_section(sect, seed_override=None):
    kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name not in sect:
            continue
        raw = sect[f.name]
        if f.name in ("weights", "hidden"):
            kwargs[f.name] = tuple(float(x) for x in raw.split(","))
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        elif f.type in ("bool", bool):
            kwargs[f.name] = sect.getboolean(f.name)
        else:
            kwargs[f.name] = raw
    if seed_override is not None:
        kwargs["seed"] = seed_override
    if "hidden" in kwargs:
        kwargs["hidden"] = tuple(int(x) for x in kwargs["hidden"])
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad [train] section: {exc}") from exc


def _load_spec(path, seed_override=None):
    """(WorldConfig, TrainConfig, raw parser) from one experiment file."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ValidationError(f"config file not found: {path}")
    problems = []
    if "world" not in parser:
        problems.append("missing [world] section")
    train_cfg = None
    if "train" in parser:
        if "weights" not in parser["train"]:
            problems.append("missing field: [train] weights")
        else:
            try:
                train_cfg = _parse_train_section(parser["train"], seed_override)
            except ValidationError as exc:
                problems.append(str(exc))
    else:
        problems.append("missing [train] section")
    if problems:
        raise ValidationError("; ".join(problems))
    world_cfg = load_world_config(path)
    if seed_override is not None:
        world_cfg = dataclasses.replace(world_cfg, seed=seed_override)
    return world_cfg, train_cfg, parser


def _echo_config(name, world_cfg, train_cfg=None, extra=None):
    print(f"# gsplab {name}: resolved configuration")
    print(f"world = {world_cfg}")
    if train_cfg is not None:
        print(f"train = {train_cfg}")
    if extra:
        for k, v in extra.items():
            print(f"{k} = {v}")


def _write_manifest(out_dir):
    out_dir = Path(out_dir)
    lines = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.txt":
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"{digest}  {p.relative_to(out_dir)}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec_hash(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# golden: worked three-ad example


def _golden_request(with_pcvr=0.0):
    feats = []
    for pctr in (0.1, 0.2, 0.3):
        x = np.zeros(FEATURE_DIM)
        x[0] = pctr
        feats.append(x)
    cands = [
        AdCandidate("Ad1", 10.0, feats[0]),
        AdCandidate("Ad2", 2.4, feats[1]),
        AdCandidate("Ad3", 1.3, feats[2]),
    ]
    return AuctionRequest(cands, slots=2, slot_ctr_factors=np.array([1.0, 1.0]))


def golden_example():
    """Both halves of the worked three-ad example.

    Returns (rows, failures); expected revenue uses PPC * pCTR per winner.
    """
    request = _golden_request()
    pctr = {"Ad1": 0.1, "Ad2": 0.2, "Ad3": 0.3}
    checks = []

    gsp = run_auction(request, GspMechanism(sigma=1.0))
    expected_gsp = {"Ad1": (1, 4.8), "Ad2": (2, 1.95)}
    rev = sum(p * pctr[a] for a, _s, p in gsp.winners)
    ctr = sum(pctr[a] for a, _s, _p in gsp.winners)
    checks.append(("gsp winners", sorted(a for a, _s, _p in gsp.winners),
                   sorted(expected_gsp), 0))
    for ad, slot, price in gsp.winners:
        exp_slot, exp_price = expected_gsp[ad]
        checks.append((f"gsp {ad} slot", slot, exp_slot, 0))
        checks.append((f"gsp {ad} ppc", price, exp_price, 1e-9))
    checks.append(("gsp revenue", rev, 0.87, 1e-9))
    checks.append(("gsp ctr", ctr, 0.3, 1e-9))

    deep = run_auction(request, FixedScoreMechanism())
    expected_deep = {"Ad1": (1, 9.54), "Ad3": (2, 1.25)}
    rev_d = sum(p * pctr[a] for a, _s, p in deep.winners)
    ctr_d = sum(pctr[a] for a, _s, _p in deep.winners)
    checks.append(("deep winners", sorted(a for a, _s, _p in deep.winners),
                   sorted(expected_deep), 0))
    for ad, slot, price in deep.winners:
        exp_slot, exp_price = expected_deep[ad]
        checks.append((f"deep {ad} slot", slot, exp_slot, 0))
        checks.append((f"deep {ad} ppc", price, exp_price, 0.02))
    checks.append(("deep revenue", rev_d, 1.329, 0.005))
    checks.append(("deep ctr", ctr_d, 0.4, 1e-9))

    failures = []
    for name, got, want, tol in checks:
        if tol == 0:
            ok = got == want
        else:
            ok = abs(got - want) <= tol
        if not ok:
            failures.append((name, got, want))
    return checks, failures


def cmd_golden(args):
    checks, failures = golden_example()
    for name, got, want, tol in checks:
        status = "FAIL" if any(f[0] == name for f in failures) else "ok"
        print(f"{status:4s} {name}: computed {got} expected {want} (tol {tol})")
    if failures:
        return EXIT_GOLDEN_MISMATCH
    print("golden worked-example check passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen-world


def cmd_gen_world(args):
    out = _out_dir(args)
    cfg = WorldConfig(seed=args.seed)
    _echo_config("gen-world", cfg)
    path = out / "world.ini"
    save_world_config(cfg, path)
    print(f"wrote {path}")
    _write_manifest(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / evaluate


def cmd_train(args):
    world_cfg, train_cfg, _ = _load_spec(args.config, args.seed)
    out = _out_dir(args)
    _echo_config("train", world_cfg, train_cfg, {"seed": train_cfg.seed})
    world = World(world_cfg)
    result = train(world, train_cfg)
    result.actor.save(out / "actor.ckpt")
    result.critic.save(out / "critic.ckpt")
    write_report_csv(out / "report.csv", result.report)
    save_world_config(world_cfg, out / "world.ini")
    print(f"final objective F = {result.final_objective:.6f}")
    _write_manifest(out)
    return EXIT_OK


def _mechanism_from_args(args, parser=None):
    if args.model:
        return DeepGspMechanism(BidMultiplierNet.load(args.model))
    if args.mechanism == "gsp":
        return GspMechanism(sigma=args.sigma)
    if args.mechanism == "ugsp":
        lambdas = tuple(float(x) for x in args.lambdas.split(","))
        return UgspMechanism(lambdas)
    raise ValidationError(f"unknown mechanism {args.mechanism!r}")


def cmd_evaluate(args):
    world_cfg, train_cfg, _ = _load_spec(args.config, args.seed)
    out = _out_dir(args)
    mech = _mechanism_from_args(args)
    _echo_config("evaluate", world_cfg, train_cfg,
                 {"mechanism": mech, "seed": train_cfg.seed})
    world = World(world_cfg)
    metrics, utility = world.evaluate(mech, train_cfg.eval_rounds,
                                      train_cfg.seed)
    f = scalarize(metrics, train_cfg.weights)
    print(f"metrics (normalized): rpm={metrics.rpm:.4f} ctr={metrics.ctr:.4f} "
          f"acr={metrics.acr:.4f} cvr={metrics.cvr:.4f} gpm={metrics.gpm:.4f}")
    print(f"objective F = {f:.6f}; total advertiser utility = {utility.sum():.4f}")
    with open(out / "metrics.csv", "w") as fh:
        fh.write("rpm,ctr,acr,cvr,gpm,objective\n")
        fh.write(f"{metrics.rpm},{metrics.ctr},{metrics.acr},"
                 f"{metrics.cvr},{metrics.gpm},{f}\n")
    _write_manifest(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# pareto / transition sweeps

_METRIC_INDEX = {"ctr": 1, "acr": 2, "cvr": 3, "gpm": 4}


def _train_point(world_cfg, train_cfg, cache_dir):
    """Train (or load from cache) one Deep GSP model; returns actor path."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = _spec_hash(world_cfg, train_cfg)
    path = cache_dir / f"actor_{key}.ckpt"
    if not path.exists():
        world = World(world_cfg)
        result = train(world, train_cfg)
        result.actor.save(path)
        write_report_csv(cache_dir / f"report_{key}.csv", result.report)
    return str(path)


def _pareto_point(task):
    """Worker: one lambda point of the Pareto sweep."""
    world_cfg, train_cfg, lam, metric_name, cache_dir, eval_seed, n_eval = task
    world = World(world_cfg)
    actor_path = _train_point(world_cfg, train_cfg, cache_dir)
    actor = BidMultiplierNet.load(actor_path)
    mech = DeepGspMechanism(actor)
    metrics, _ = world.evaluate(mech, n_eval, eval_seed)
    return lam, metrics.as_vector()


def cmd_pareto(args):
    world_cfg, base_train, parser = _load_spec(args.config, args.seed)
    out = _out_dir(args)
    sweep = parser["sweep"] if "sweep" in parser else {}
    lam_grid = [float(x) for x in
                sweep.get("lambda_grid", "0,0.2,0.4,0.6,0.8,1.0").split(",")]
    sigma_grid = [float(x) for x in
                  sweep.get("sigma_grid", "0.5,0.75,1.0,1.25,1.5,1.75,2.0").split(",")]
    ugsp_grid = [float(x) for x in
                 sweep.get("ugsp_grid", "0.2,0.5,1,2,5,10").split(",")]
    metric_name = sweep.get("trade_metric", "ctr")
    if metric_name not in _METRIC_INDEX:
        raise ValidationError(f"trade_metric must be one of {sorted(_METRIC_INDEX)}")
    if sorted(lam_grid) != lam_grid or not lam_grid:
        raise ValidationError("lambda_grid must be nonempty and sorted")
    mi = _METRIC_INDEX[metric_name]
    n_eval = int(sweep.get("compare_rounds", "6000"))
    _echo_config("pareto", world_cfg, base_train,
                 {"lambda_grid": lam_grid, "sigma_grid": sigma_grid,
                  "trade_metric": metric_name, "compare_rounds": n_eval,
                  "seed": base_train.seed})
    world = World(world_cfg)
    eval_seed = base_train.seed + 0x5EED

    tasks = []
    for lam in lam_grid:
        weights = [0.0] * 5
        weights[0] = lam
        weights[mi] = 1.0 - lam
        cfg = dataclasses.replace(base_train, weights=tuple(weights))
        if "kappa_price" not in parser["train"]:
            # sweep points at the frontier edges need bid-sensitive
            # multipliers, which the pricing regularizer forbids
            cfg = dataclasses.replace(cfg, kappa_price=0.0)
        tasks.append((world_cfg, cfg, lam, metric_name, str(out / "models"),
                      eval_seed, n_eval))
    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(args.workers) as pool:
            deep_points = list(pool.map(_pareto_point, tasks))
    else:
        deep_points = [_pareto_point(t) for t in tasks]

    rows = []
    for lam, vec in deep_points:
        rows.append(("deepgsp", f"lambda={lam}", lam, vec[mi], vec[0]))
    baselines = {}
    for sig in sigma_grid:
        m, _ = world.evaluate(GspMechanism(sigma=sig), n_eval, eval_seed)
        baselines.setdefault("gsp", []).append((f"sigma={sig}", m.as_vector()))
    bid_scale = float(np.exp(world.value_mu.mean()
                             + 0.5 * world_cfg.value_sigma**2))
    for c in ugsp_grid:
        lambdas = (1.0, c * bid_scale, 0.0) if metric_name in ("ctr", "acr") \
            else (1.0, 0.0, c * bid_scale)
        m, _ = world.evaluate(UgspMechanism(lambdas), n_eval, eval_seed)
        baselines.setdefault("ugsp", []).append((f"c={c}", m.as_vector()))
    for name, pts in baselines.items():
        for label, vec in pts:
            rows.append((name, label, "", vec[mi], vec[0]))

    # a lambda point counts as weakly dominating when its scalarized
    # objective reaches every baseline's within 1% slack
    dominated = 0
    for lam, vec in deep_points:
        f_deep = lam * vec[0] + (1 - lam) * vec[mi]
        f_base = max(lam * v[0] + (1 - lam) * v[mi]
                     for pts in baselines.values() for _lbl, v in pts)
        if f_deep >= 0.99 * f_base:
            dominated += 1
    frac = dominated / len(deep_points)

    with open(out / "pareto.csv", "w") as fh:
        fh.write(f"mechanism,param,lambda,{metric_name},rpm\n")
        for r in rows:
            fh.write(",".join(str(x) for x in r) + "\n")
    print(f"deep gsp weakly dominates both baselines on "
          f"{dominated}/{len(deep_points)} lambda points ({frac:.0%})")
    _write_manifest(out)
    return EXIT_OK


def _transition_point(task):
    world_cfg, train_cfg, eps, cache_dir, eval_seed, n_eval = task
    cfg = dataclasses.replace(train_cfg, eps=eps)
    world = World(world_cfg)
    actor_path = _train_point(world_cfg, cfg, cache_dir)
    actor = BidMultiplierNet.load(actor_path)
    metrics, utility = world.evaluate(DeepGspMechanism(actor),
                                      n_eval, eval_seed)
    return eps, scalarize(metrics, cfg.weights), float(utility.sum()) / n_eval


def cmd_transition(args):
    world_cfg, base_train, parser = _load_spec(args.config, args.seed)
    out = _out_dir(args)
    sweep = parser["sweep"] if "sweep" in parser else {}
    eps_grid = [float(x) for x in
                sweep.get("eps_grid", "0,0.1,0.2,0.3,0.4").split(",")]
    if sorted(eps_grid) != eps_grid or not eps_grid:
        raise ValidationError("eps_grid must be nonempty and sorted")
    n_eval = int(sweep.get("compare_rounds", "4000"))
    _echo_config("transition", world_cfg, base_train,
                 {"eps_grid": eps_grid, "compare_rounds": n_eval,
                  "seed": base_train.seed})
    world = World(world_cfg)
    eval_seed = base_train.seed + 0x5EED
    m0 = GspMechanism(sigma=1.0)
    m0_metrics, m0_utility = world.evaluate(m0, n_eval, eval_seed)
    m0_f = scalarize(m0_metrics, base_train.weights)
    m0_u = float(m0_utility.sum()) / n_eval

    tasks = [(world_cfg, base_train, eps, str(out / "models"), eval_seed,
              n_eval) for eps in eps_grid]
    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(args.workers) as pool:
            points = list(pool.map(_transition_point, tasks))
    else:
        points = [_transition_point(t) for t in tasks]

    with open(out / "transition.csv", "w") as fh:
        fh.write("eps,adv_utility_pct,platform_objective_pct\n")
        for eps, f, u in points:
            adv_pct = 100.0 * u / m0_u if m0_u > 0 else float("nan")
            plat_pct = 100.0 * f / m0_f if m0_f > 0 else float("nan")
            fh.write(f"{eps},{adv_pct},{plat_pct}\n")
            print(f"eps={eps}: advertiser utility {adv_pct:.2f}% of benchmark, "
                  f"platform objective {plat_pct:.2f}% of benchmark")
    _write_manifest(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# audit


def cmd_audit(args):
    world_cfg, train_cfg, _ = _load_spec(args.config, args.seed)
    out = _out_dir(args)
    actor = BidMultiplierNet.load(args.model)
    _echo_config("audit", world_cfg, train_cfg,
                 {"model": args.model, "seed": train_cfg.seed})
    world = World(world_cfg)
    cfg = AuditConfig(seed=train_cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA0D)))
    rounds = world.sample_rounds(cfg.n_states, rng)
    states = [(rounds.bids[i, i % world.n_advertisers],
               rounds.feats[i, i % world.n_advertisers])
              for i in range(cfg.n_states)]
    mech = DeepGspMechanism(actor)
    mono = monotonicity_metric(actor, states, cfg)
    per = payment_error_rate(world, mech, cfg)
    isic = i_sic(mech, single_slot_world(world), cfg)
    weights = ",".join(str(w) for w in train_cfg.weights)
    print("metrics_configuration  T_m      PER      IC")
    print(f"({weights})  {mono.t_m:.4f}  {per.mean:.4f}  {isic.value:.4f}")
    with open(out / "audit.csv", "w") as fh:
        fh.write("weights,t_m,per_mean,per_p05,per_p95,isic\n")
        fh.write(f"\"{weights}\",{mono.t_m},{per.mean},{per.p05},{per.p95},"
                 f"{isic.value}\n")
    _write_manifest(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="gsplab",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("golden", help="run the golden worked-example check")
    p.set_defaults(func=cmd_golden)

    p = sub.add_parser("gen-world", help="write a default world config")
    common(p, needs_config=False)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("train", help="train a rank-score model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a mechanism on a world")
    common(p)
    p.add_argument("--model", default=None, help="actor checkpoint")
    p.add_argument("--mechanism", default="gsp", choices=["gsp", "ugsp"])
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--lambdas", default="1,0,0")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pareto", help="lambda-sweep Pareto curves")
    common(p)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("transition", help="epsilon-sweep smooth transition")
    common(p)
    p.set_defaults(func=cmd_transition)

    p = sub.add_parser("audit", help="monotonicity / PER / i-SIC report")
    common(p)
    p.add_argument("--model", required=True, help="actor checkpoint")
    p.set_defaults(func=cmd_audit)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    return code


if __name__ == "__main__":
    sys.exit(main())
