"""Experiment harness behind the command-line interface.

Every command is a pure function of an :class:`ExperimentConfig` (the seed
lives in the config) and returns plain Python data; the CLI only handles
files and exit codes. Rates written to output are always recomputed from
the final ``(x, p)``.

Config grammar
--------------
An INI file read with :mod:`configparser`. Four sections, all optional::

    [scenario]
    m = 5                     ; number of mBSs
    n = 10                    ; number of users
    area_side_m = 100
    coverage_radius_m = inf
    fading = exponential_unit_mean   ; or deterministic_unit
    seed = 42
    max_assoc = none          ; per-user cap L, none = unbounded
    enforce_qos = true
    weights = none            ; comma list summing to 1, none = equal
    mbs_xy = none             ; "x y; x y; ..." fixes the mBS positions
    user_xy = none            ; same, fixes the users too

    [channel]                 ; every ChannelParams field
    bandwidth_hz = 100e6
    path_loss_exp = 2
    wavelength_m = 5e-3
    noise_psd_dbm_per_hz = -174
    p_min_mw = 0
    p_max_mw = 1000
    r_min_bps = 100e6

    [solver]                  ; CcpSettings, RecoverySettings, recovery route
    tau = 1e-4
    max_outer = 100
    warm_start = true
    rate_form = exact
    inexact = 0.01
    init_spread = 0.5
    eps_gap = 1e-7
    threshold = 0.5
    bnb_node_cap = 4096
    reopt_power = true
    bound = valid             ; branch-and-bound node bound: valid or ccp
    recovery = auto           ; round, bnb or auto

    [experiment]
    kind = solve              ; solve, pareto, montecarlo, assoc_sweep, coverage_sweep
    weight_step = 0.01
    pareto_weights = none     ; "w1 w2 ...; w1 w2 ..." for n > 3
    draws = 10000
    sizes = 10x5, 15x5, 20x5  ; n x m scenarios for montecarlo
    l_list = 1, 2, 3, 4, 5
    coverage_list = 10, 15, 20, 25, 30, 40
    n_list = 10
    reps = 100
    workers = 1

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import concurrent.futures as cf
import configparser
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .barrier import BarrierSettings
from .baselines import pop_ua_pa, random_feasible
from .ccp import CcpSettings
from .errors import InfeasibleGeometryError, InfeasibleInstanceError, SolverFailure
from .model import InstanceConfig
from .pipeline import RECOVERY_MODES, mcua_pa
from .recover import RecoverySettings
from .scenario import ChannelParams, FadingModel, build_scenario, generate_placement, user_rates

__all__ = ["ConfigError", "ScenarioBlock", "SolverBlock", "ExperimentBlock",
           "ExperimentConfig", "load_config", "parse_config", "pareto_grid",
           "cmd_solve", "cmd_pareto", "cmd_montecarlo", "cmd_assoc_sweep",
           "cmd_coverage_sweep", "SCHEMAS", "KINDS"]

KINDS = ("solve", "pareto", "montecarlo", "assoc_sweep", "coverage_sweep")

SCHEMAS = {
    "pareto": "mcuapa.pareto/1",
    "montecarlo": "mcuapa.montecarlo/1",
    "assoc_sweep": "mcuapa.assoc_sweep/1",
    "coverage_sweep": "mcuapa.coverage_sweep/1",
}

# random draws per substream; fixes the stream layout independent of workers
DRAW_CHUNK = 1000


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ScenarioBlock:
    m: int = 5
    n: int = 10
    area_side_m: float = 100.0
    coverage_radius_m: float = math.inf
    fading: str = "exponential_unit_mean"
    seed: int = 42
    max_assoc: int | None = None
    enforce_qos: bool = True
    weights: tuple | None = None
    mbs_xy: tuple | None = None
    user_xy: tuple | None = None


@dataclass(frozen=True)
class SolverBlock:
    ccp: CcpSettings = field(default_factory=CcpSettings)
    recovery: RecoverySettings = field(default_factory=RecoverySettings)
    mode: str = "auto"


@dataclass(frozen=True)
class ExperimentBlock:
    kind: str = "solve"
    weight_step: float = 0.01
    pareto_weights: tuple | None = None
    draws: int = 10000
    sizes: tuple = ((10, 5), (15, 5), (20, 5))
    l_list: tuple = (1, 2, 3, 4, 5)
    coverage_list: tuple = (10.0, 15.0, 20.0, 25.0, 30.0, 40.0)
    n_list: tuple = (10,)
    reps: int = 100
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioBlock = field(default_factory=ScenarioBlock)
    channel: ChannelParams = field(default_factory=ChannelParams)
    solver: SolverBlock = field(default_factory=SolverBlock)
    experiment: ExperimentBlock = field(default_factory=ExperimentBlock)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, scenario=dataclasses.replace(self.scenario, seed=int(seed)))

    def instance(self, n: int | None = None, max_assoc="keep", weights=None,
                 enforce_qos=None) -> InstanceConfig:
        sc = self.scenario
        n = sc.n if n is None else n
        L = sc.max_assoc if max_assoc == "keep" else max_assoc
        qos = sc.enforce_qos if enforce_qos is None else enforce_qos
        if weights is None and sc.weights is not None and n == sc.n:
            weights = sc.weights
        if weights is None:
            return InstanceConfig.equal(n, L, qos)
        return InstanceConfig(np.asarray(weights, dtype=float), L, qos)


# ---------------------------------------------------------------- parsing

def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _none(conv):
    def f(s):
        return None if s.strip().lower() in ("none", "") else conv(s)
    return f


def _floats(s):
    return tuple(float(t) for t in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(t) for t in s.replace(",", " ").split())


def _points(s):
    pts = tuple(_floats(chunk) for chunk in s.split(";") if chunk.strip())
    if any(len(p) != 2 for p in pts):
        raise ValueError("points must be 'x y' pairs separated by ';'")
    return pts


def _vectors(s):
    return tuple(_floats(chunk) for chunk in s.split(";") if chunk.strip())


def _sizes(s):
    out = []
    for tok in s.replace(",", " ").split():
        a, b = tok.lower().split("x")
        out.append((int(a), int(b)))
    return tuple(out)


_SCENARIO_KEYS = {
    "m": int, "n": int, "area_side_m": float, "coverage_radius_m": float,
    "fading": str, "seed": int, "max_assoc": _none(int), "enforce_qos": _bool,
    "weights": _none(_floats), "mbs_xy": _none(_points), "user_xy": _none(_points),
}
_CHANNEL_KEYS = {k: float for k in ChannelParams.__dataclass_fields__}
_CCP_KEYS = {"tau": float, "max_outer": int, "warm_start": _bool, "rate_form": str,
             "inexact": float, "init_spread": float}
_BARRIER_KEYS = {"eps_gap": float}
_RECOVERY_KEYS = {"threshold": float, "bnb_node_cap": int, "reopt_power": _bool,
                  "bound": str}
_EXPERIMENT_KEYS = {
    "kind": str, "weight_step": float, "pareto_weights": _none(_vectors), "draws": int,
    "sizes": _sizes, "l_list": _ints, "coverage_list": _floats, "n_list": _ints,
    "reps": int, "workers": int,
}


def _read(section, table, where):
    out = {}
    for key, raw in section.items():
        if key not in table:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        try:
            out[key] = table[key](raw)
        except ValueError as exc:
            raise ConfigError(f"[{where}] {key}: {exc}") from None
    return out


def parse_config(text: str) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from INI text; see the module docs."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    extra = set(cp.sections()) - {"scenario", "channel", "solver", "experiment"}
    if extra:
        raise ConfigError(f"unknown sections {sorted(extra)}")
    sect = {name: cp[name] if cp.has_section(name) else {} for name in
            ("scenario", "channel", "solver", "experiment")}
    try:
        scenario = ScenarioBlock(**_read(sect["scenario"], _SCENARIO_KEYS, "scenario"))
        channel = ChannelParams(**_read(sect["channel"], _CHANNEL_KEYS, "channel"))
        solver_tab = {**_CCP_KEYS, **_BARRIER_KEYS, **_RECOVERY_KEYS, "recovery": str}
        sv = _read(sect["solver"], solver_tab, "solver")
        inner = BarrierSettings(**{k: sv.pop(k) for k in list(sv) if k in _BARRIER_KEYS})
        ccp = CcpSettings(inner=inner, **{k: sv.pop(k) for k in list(sv) if k in _CCP_KEYS})
        rec = RecoverySettings(**{k: sv.pop(k) for k in list(sv) if k in _RECOVERY_KEYS})
        solver = SolverBlock(ccp, rec, sv.pop("recovery", "auto"))
        experiment = ExperimentBlock(**_read(sect["experiment"], _EXPERIMENT_KEYS, "experiment"))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig(scenario, channel, solver, experiment)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks; raises :class:`ConfigError`."""
    sc, ex = cfg.scenario, cfg.experiment
    problems = []
    if sc.m < 1 or sc.n < 1:
        problems.append("scenario m and n must be >= 1")
    if sc.fading not in ("deterministic_unit", "exponential_unit_mean"):
        problems.append(f"unknown fading {sc.fading!r}")
    if sc.max_assoc is not None and sc.max_assoc < 1:
        problems.append("max_assoc must be >= 1")
    if sc.weights is not None:
        w = np.asarray(sc.weights)
        if w.size != sc.n or np.any(w <= 0) or abs(w.sum() - 1) > 1e-9:
            problems.append("weights must be n positive numbers summing to 1")
    if sc.user_xy is not None and sc.mbs_xy is None:
        problems.append("user_xy needs mbs_xy")
    if sc.mbs_xy is not None and len(sc.mbs_xy) != sc.m:
        problems.append("mbs_xy must list m points")
    if sc.user_xy is not None and len(sc.user_xy) != sc.n:
        problems.append("user_xy must list n points")
    if cfg.solver.mode not in RECOVERY_MODES:
        problems.append(f"recovery must be one of {RECOVERY_MODES}")
    if ex.kind not in KINDS:
        problems.append(f"kind must be one of {KINDS}")
    if not 0 < ex.weight_step < 0.5:
        problems.append("weight_step must lie in (0, 0.5)")
    if ex.draws < 0 or ex.reps < 1 or ex.workers < 1:
        problems.append("draws >= 0, reps >= 1 and workers >= 1 required")
    if any(L < 1 for L in ex.l_list) or not ex.l_list:
        problems.append("l_list must hold integers >= 1")
    if not ex.coverage_list or any(r <= 0 for r in ex.coverage_list):
        problems.append("coverage_list must hold positive radii")
    if not ex.n_list or any(k < 1 for k in ex.n_list):
        problems.append("n_list must hold positive user counts")
    if any(a < 1 or b < 1 for a, b in ex.sizes):
        problems.append("sizes must be n x m with n, m >= 1")
    if problems:
        raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------- helpers

def derive_seed(seed: int, *path: int) -> int:
    """Child seed for a task, e.g. ``(seed, stream tag, repetition)``."""
    return int(np.random.SeedSequence([int(seed), *map(int, path)]).generate_state(1)[0])


def fixed_mbs(cfg: ExperimentConfig, m: int | None = None) -> np.ndarray:
    """mBS positions shared by all repetitions of a sweep."""
    sc = cfg.scenario
    if sc.mbs_xy is not None:
        return np.array(sc.mbs_xy, dtype=float)
    rng = np.random.default_rng(derive_seed(sc.seed, 0))
    return rng.uniform(0.0, sc.area_side_m, size=(m or sc.m, 2))


def make_scenario(cfg: ExperimentConfig, n=None, m=None, seed=None, radius=None,
                  mbs_xy=None):
    sc = cfg.scenario
    n = sc.n if n is None else n
    m = sc.m if m is None else m
    seed = sc.seed if seed is None else seed
    radius = sc.coverage_radius_m if radius is None else radius
    if sc.user_xy is not None and n == sc.n and m == sc.m:
        pl = generate_placement(m, n, sc.area_side_m, radius, mode="fixed_list",
                                mbs_xy=sc.mbs_xy, user_xy=sc.user_xy)
    else:
        if mbs_xy is None and sc.mbs_xy is not None and m == sc.m:
            mbs_xy = sc.mbs_xy
        pl = generate_placement(m, n, sc.area_side_m, radius, seed=seed, mbs_xy=mbs_xy)
    return build_scenario(cfg.channel, pl, FadingModel(sc.fading, seed))


def _run(fn, tasks, workers):
    """Map ``fn`` over ``tasks``; results come back in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with cf.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _solve(cfg, scn, inst, trace_path=None):
    return mcua_pa(scn, inst, cfg.solver.ccp, cfg.solver.recovery, cfg.solver.mode,
                   trace_path=trace_path)


# ---------------------------------------------------------------- commands

def cmd_solve(cfg: ExperimentConfig, trace_path=None) -> dict:
    """One joint solve. ``status`` is ``"ok"`` or ``"infeasible"`` (with reason).

    Raises
    ------
    SolverFailure
        Numerical breakdown; the CLI maps it to exit code 3.
    """
    try:
        scn = make_scenario(cfg)
    except InfeasibleGeometryError as exc:
        return {"status": "infeasible", "reason": str(exc)}
    inst = cfg.instance()
    rep = _solve(cfg, scn, inst, trace_path)
    doc = rep.to_dict()
    doc["seed"] = cfg.scenario.seed
    doc["trace_path"] = None if trace_path is None else str(trace_path)
    if rep.status == "ok":
        doc["feasible"] = not rep.feasibility.without("C6").violated
        doc["scenario"] = scn.to_dict()
    return doc


def pareto_grid(n: int, step: float) -> list:
    """Weight vectors with every entry a positive multiple of ``step``.

    ``n=2`` gives ``(k*step, 1 - k*step)`` for ``k = 1 .. 1/step - 1``;
    ``n=3`` the matching 2-simplex grid.
    """
    N = round(1.0 / step)
    if not math.isclose(N * step, 1.0, rel_tol=1e-9):
        raise ConfigError("weight_step must divide 1")
    if n == 2:
        return [(k / N, 1.0 - k / N) for k in range(1, N)]
    if n == 3:
        return [(a / N, b / N, 1.0 - a / N - b / N)
                for a in range(1, N - 1) for b in range(1, N - a)]
    raise ConfigError("the grid sweep needs n in {2, 3}; give pareto_weights otherwise")


def _pareto_point(args):
    cfg, weights = args
    scn = make_scenario(cfg)
    try:
        rep = _solve(cfg, scn, cfg.instance(weights=np.asarray(weights)))
    except SolverFailure as exc:
        return "solver_failure", str(exc), None
    if rep.status != "ok":
        return rep.status, rep.reason, None
    return "ok", "", rep.rates


def cmd_pareto(cfg: ExperimentConfig) -> tuple:
    """Weighted-sum sweep. Returns ``(header, rows)``.

    Rows hold index, status, the weight vector, per-user rates, total rate
    and two flags: ``balanced`` (smallest max-min rate spread) and
    ``max_total``. Failed points keep their row with empty rates.
    """
    n = cfg.scenario.n
    ex = cfg.experiment
    if ex.pareto_weights is not None:
        grid = [tuple(w) for w in ex.pareto_weights]
        for w in grid:
            if len(w) != n or min(w) <= 0 or abs(sum(w) - 1) > 1e-9:
                raise ConfigError("each pareto weight vector needs n positive entries summing to 1")
    else:
        grid = pareto_grid(n, ex.weight_step)
    make_scenario(cfg)  # surface geometry errors once, before the sweep
    out = _run(_pareto_point, [(cfg, w) for w in grid], ex.workers)

    ok = [k for k, r in enumerate(out) if r[0] == "ok"]
    balanced = min(ok, key=lambda k: np.ptp(out[k][2]), default=None)
    best = max(ok, key=lambda k: out[k][2].sum(), default=None)
    header = (["index", "status"] + [f"w{i}" for i in range(n)]
              + [f"rate{i}_bps" for i in range(n)] + ["total_bps", "balanced", "max_total", "reason"])
    rows = []
    for k, (w, (status, reason, rates)) in enumerate(zip(grid, out)):
        vals = [repr(float(r)) for r in rates] + [repr(float(rates.sum()))] if rates is not None \
            else [""] * (n + 1)
        rows.append([k, status] + [repr(float(x)) for x in w] + vals
                    + [int(k == balanced), int(k == best), reason])
    return header, rows


def _mc_chunk(args):
    cfg, n, m, seed, chunk, count = args
    scn = make_scenario(cfg, n=n, m=m, seed=seed)
    inst = cfg.instance(n=n, enforce_qos=False)
    return [(s.index, s.objective, s.meets_qos)
            for s in random_feasible(scn, inst, count, seed, worker=chunk,
                                     start=chunk * DRAW_CHUNK)]


def cmd_montecarlo(cfg: ExperimentConfig) -> tuple:
    """Random resource-feasible cloud plus the optimized value per scenario.

    The optimized value solves the same resource-feasible set the sampler
    draws from (QoS off); whether it meets QoS is reported alongside.
    ``draws = 0`` yields the header only.
    """
    ex = cfg.experiment
    header = ["scenario", "n", "m", "kind", "index", "weighted_objective_bps", "meets_qos"]
    rows = []
    if ex.draws == 0:
        return header, rows
    for tag, (n, m) in enumerate(ex.sizes):
        seed = derive_seed(cfg.scenario.seed, 1, tag)
        scn = make_scenario(cfg, n=n, m=m, seed=seed)
        inst = cfg.instance(n=n, enforce_qos=False)
        rep = _solve(cfg, scn, inst)
        name = f"{n}x{m}"
        if rep.status == "ok":
            rows.append([name, n, m, "optimized", -1, repr(rep.objective),
                         int(bool(np.all(rep.rates >= cfg.channel.r_min_bps)))])
        else:
            rows.append([name, n, m, "optimized_failed", -1, "", ""])
        tasks = [(cfg, n, m, seed, c, min(DRAW_CHUNK, ex.draws - c * DRAW_CHUNK))
                 for c in range(math.ceil(ex.draws / DRAW_CHUNK))]
        for chunk in _run(_mc_chunk, tasks, ex.workers):
            rows += [[name, n, m, "sample", i, repr(v), int(q)] for i, v, q in chunk]
    return header, rows


def _assoc_rep(args):
    cfg, mbs, L, r = args
    seed = derive_seed(cfg.scenario.seed, 2, r)
    try:
        scn = make_scenario(cfg, seed=seed, mbs_xy=mbs)
        inst = cfg.instance(max_assoc=L)
        rep = _solve(cfg, scn, inst)
        if rep.status != "ok":
            return None, None, rep.status
        pop = pop_ua_pa(scn, inst, L, settings=cfg.solver.ccp.inner)
        return rep.total_rate, float(user_rates(scn, pop.x, pop.p).sum()), "ok"
    except (InfeasibleGeometryError, InfeasibleInstanceError):
        return None, None, "infeasible"
    except SolverFailure:
        return None, None, "solver_failure"


def cmd_assoc_sweep(cfg: ExperimentConfig) -> tuple:
    """Mean MCUA-PA and PoP-UA-PA total rates per association cap ``L``.

    mBSs stay fixed; users are redrawn per repetition and the same
    placement is reused across ``L``. A failed repetition is dropped from
    both means for that ``L`` and counted. Returns ``(header, rows, raw)``
    where ``raw[L]`` lists the per-repetition pairs.
    """
    ex = cfg.experiment
    mbs = fixed_mbs(cfg)
    tasks = [(cfg, mbs, L, r) for L in ex.l_list for r in range(ex.reps)]
    out = _run(_assoc_rep, tasks, ex.workers)
    header = ["L", "reps", "ok", "failures", "mean_mcua_bps", "mean_pop_bps", "mean_gap_bps"]
    rows, raw = [], {}
    for a, L in enumerate(ex.l_list):
        chunk = out[a * ex.reps:(a + 1) * ex.reps]
        pairs = [(x, y) for x, y, st in chunk if st == "ok"]
        raw[L] = pairs
        if pairs:
            mc, pp = np.mean(pairs, axis=0)
            vals = [repr(float(mc)), repr(float(pp)), repr(float(mc - pp))]
        else:
            vals = ["", "", ""]
        rows.append([L, ex.reps, len(pairs), ex.reps - len(pairs)] + vals)
    return header, rows, raw


def _coverage_rep(args):
    cfg, mbs, radius, n, r = args
    seed = derive_seed(cfg.scenario.seed, 3, r)
    try:
        scn = make_scenario(cfg, n=n, seed=seed, radius=radius, mbs_xy=mbs)
        rep = _solve(cfg, scn, cfg.instance(n=n))
    except (InfeasibleGeometryError, InfeasibleInstanceError):
        return None, "infeasible"
    except SolverFailure:
        return None, "solver_failure"
    return (rep.total_rate, "ok") if rep.status == "ok" else (None, rep.status)


def cmd_coverage_sweep(cfg: ExperimentConfig) -> tuple:
    """Mean optimized total rate per (coverage radius, user count).

    Returns ``(header, rows, raw)`` with ``raw[(radius, n)]`` the list of
    per-repetition totals.
    """
    ex = cfg.experiment
    mbs = fixed_mbs(cfg)
    keys = [(rad, n) for rad in ex.coverage_list for n in ex.n_list]
    tasks = [(cfg, mbs, rad, n, r) for rad, n in keys for r in range(ex.reps)]
    out = _run(_coverage_rep, tasks, ex.workers)
    header = ["coverage_radius_m", "n", "reps", "ok", "failures", "mean_total_bps"]
    rows, raw = [], {}
    for a, (rad, n) in enumerate(keys):
        vals = [v for v, st in out[a * ex.reps:(a + 1) * ex.reps] if st == "ok"]
        raw[(rad, n)] = vals
        mean = repr(float(np.mean(vals))) if vals else ""
        rows.append([repr(rad), n, ex.reps, len(vals), ex.reps - len(vals), mean])
    return header, rows, raw
