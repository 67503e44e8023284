"""Poisoning experiments: plans, metrics, absorption sweeps, tail checks.

The experiment pipeline per trial: draw a mixture, train a clean victim,
freeze the band reference (prototypes and the certified epsilon-tilde of
triggered train features), then for each poison budget k retrain on the
dataset plus k triggered records and score the result. Wire-format rows are

    k,trial,seed,CA,acc_drop,asr,band_asr,rho,gamma_bound

where CA is clean test accuracy, acc_drop = CA_poisoned - CA_clean, asr the
triggered flip rate to the target class, band_asr the same rate restricted
to triggered test features inside the clean victim's band, rho the drift
bound, and gamma_bound the clean-accuracy bound min(1, nu*2R*rho).
"""

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import datagen, geometry, influence, model, trigger
from .numerics import RandomStream, TrainingDiverged, as_matrix, derive_seed

log = logging.getLogger("margin_forge")

SCENARIOS = ("white", "gray", "black")


@dataclass(frozen=True)
class PoisonPlan:
    """What to inject: k triggered records aimed at ``target_class``.

    ``dirty`` mode relabels the sources to the target class; ``clean`` mode
    keeps their labels (and by default draws sources from the target class).
    ``band`` sourcing takes the records nearest the decision band of
    ``pair`` (epsilon None means no cutoff, just nearest-first); ``uniform``
    draws sources at random.
    """

    mode: str
    target_class: int
    k: int
    pattern: trigger.TriggerPattern
    source: str = "band"
    pair: tuple = None
    epsilon: float = None
    restrict_to_target: bool = True

    def __post_init__(self):
        if self.mode not in ("dirty", "clean"):
            raise ValueError("mode must be 'dirty' or 'clean'")
        if self.source not in ("band", "uniform"):
            raise ValueError("source must be 'band' or 'uniform'")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.target_class < 0:
            raise ValueError("target_class must be >= 0")
        if self.source == "band" and self.pair is None:
            raise ValueError("band sourcing needs a class pair")
        if self.pair is not None:
            object.__setattr__(self, "pair", tuple(int(c) for c in self.pair))
            if len(self.pair) != 2 or self.pair[0] == self.pair[1]:
                raise ValueError("pair must name two distinct classes")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class PoisonSet:
    x: np.ndarray
    labels: np.ndarray
    source_indices: np.ndarray
    notes: tuple = ()

    @property
    def k(self):
        return self.x.shape[0]


def build_poison_set(dataset, selection_params, plan, seed=0):
    """Materialize a plan against a dataset: pick sources, apply the trigger.

    ``selection_params`` is the model whose feature space ranks band
    candidates (the attacker's best available model). When the band holds
    fewer than k usable records the remainder falls back to uniform draws,
    noted in the result.
    """
    if plan.k == 0:
        return PoisonSet(np.empty((0, dataset.dim)), np.empty(0, dtype=np.int64),
                         np.empty(0, dtype=np.int64))
    if plan.target_class >= dataset.class_count:
        raise ValueError("target_class is outside the dataset's classes")
    pool = dataset.clean_train_indices()
    if plan.mode == "dirty":
        pool = pool[dataset.labels[pool] != plan.target_class]
    elif plan.restrict_to_target:
        pool = pool[dataset.labels[pool] == plan.target_class]
    if pool.shape[0] < plan.k:
        raise ValueError(
            f"poison budget k={plan.k} exceeds {pool.shape[0]} usable records")

    notes = []
    if plan.source == "band":
        eps = np.inf if plan.epsilon is None else plan.epsilon
        ranked = datagen.select_boundary_samples(
            dataset, selection_params, plan.pair, eps, budget=dataset.n)
        usable = set(pool.tolist())
        chosen = [i for i in ranked.tolist() if i in usable][:plan.k]
        if len(chosen) < plan.k:
            notes.append(f"band held {len(chosen)} records; "
                         f"filled {plan.k - len(chosen)} uniformly")
        chosen = np.asarray(chosen, dtype=np.int64)
    else:
        chosen = np.sort(RandomStream(seed, 2718).choice(pool, size=plan.k,
                                                         replace=False))
    if chosen.shape[0] < plan.k:
        remaining = np.setdiff1d(pool, chosen)
        extra = RandomStream(seed, 2718).choice(remaining,
                                                size=plan.k - chosen.shape[0],
                                                replace=False)
        chosen = np.concatenate([chosen, np.sort(extra)])

    x_p = trigger.apply_trigger_batch(dataset.x[chosen], plan.pattern)
    if plan.mode == "dirty":
        labels = np.full(plan.k, plan.target_class, dtype=np.int64)
    else:
        labels = dataset.labels[chosen].copy()
    return PoisonSet(x_p, labels, chosen, tuple(notes))


@dataclass
class MetricsRecord:
    k: int
    trial: int
    seed: int
    ca: float
    acc_drop: float
    asr: float
    band_asr: float
    rho: float = 0.0
    gamma_bound: float = 0.0
    band_size: int = 0
    notes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        for name in ("ca", "asr", "band_asr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v!r} is outside [0, 1]")

    def csv_row(self):
        return ",".join([str(self.k), str(self.trial), str(self.seed)]
                        + [repr(float(v)) for v in (self.ca, self.acc_drop,
                                                    self.asr, self.band_asr,
                                                    self.rho, self.gamma_bound)])


CSV_HEADER = "k,trial,seed,CA,acc_drop,asr,band_asr,rho,gamma_bound"


def evaluate(victim, dataset, pattern, target_class, ca_clean=None,
             band_model=None, band_protos=None, band_epsilon_tilde=None):
    """Score a victim: clean accuracy, trigger flip rates, band-restricted rate.

    The asr population is every clean test record whose true label is not the
    target. Band membership is judged in ``band_model``'s feature space (the
    clean reference model; defaults to the victim itself) against
    ``band_epsilon_tilde`` (defaults to the kappa+radius certificate of this
    very population, which makes every row a member).
    """
    test = dataset.clean_test_indices()
    if test.shape[0] == 0:
        raise ValueError("evaluation needs a non-empty clean test split")
    x_test = dataset.x[test]
    y_test = dataset.labels[test]
    ca = model.accuracy(victim, x_test, y_test)
    acc_drop = 0.0 if ca_clean is None else ca - float(ca_clean)

    pop = y_test != target_class
    if not np.any(pop):
        raise ValueError("no test records outside the target class")
    x_trig = trigger.apply_trigger_batch(x_test[pop], pattern)
    preds = model.predict_batch(victim, x_trig)
    asr = float(np.mean(preds == target_class))

    if band_model is None:
        band_model = victim
    if band_protos is None:
        band_protos = geometry.prototypes(band_model, dataset)
    feats = model.features_batch(band_model, x_trig)
    if band_epsilon_tilde is None:
        radius, centroid = geometry.cluster_radius(feats)
        band_epsilon_tilde = geometry.prototype_balance(centroid, band_protos) + radius
    report = geometry.multiclass_band_check(feats, band_protos, band_epsilon_tilde)
    members = report.membership
    notes = ()
    if members.any():
        band_asr = float(np.mean(preds[members] == target_class))
    else:
        band_asr = 0.0
        notes = ("band is empty under the reference model",)
    return MetricsRecord(k=0, trial=0, seed=0, ca=ca, acc_drop=acc_drop,
                         asr=asr, band_asr=band_asr,
                         band_size=int(members.sum()), notes=notes)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

def scenario_mixture(scenario, cfg, seed):
    """The adversary's data distribution: exact for white/gray, shifted and
    noisier for black."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if scenario == "black":
        means = cfg.means.copy()
        means[:, 0] += 0.5 * cfg.covariance_scale
        return dataclasses.replace(cfg, means=means,
                                   covariance_scale=1.25 * cfg.covariance_scale,
                                   seed=seed)
    return dataclasses.replace(cfg, seed=seed)


def scenario_arch(scenario, arch):
    """The adversary's architecture: exact, one extra layer, or different."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if scenario == "white":
        return arch
    if scenario == "gray":
        return dataclasses.replace(arch, hidden=arch.hidden + (16,))
    return dataclasses.replace(arch, hidden=(24,),
                               feature_dim=max(2, (arch.feature_dim or arch.input_dim) - 2))


def select_attack_classes(surrogate, surrogate_ds, pattern):
    """Pick (c_star, target) from the surrogate's view of the triggered cluster.

    c_star is the class the surrogate assigns most triggered train records;
    the target is the class it assigns fewest (ties break to the lowest
    index), i.e. the flip the poisons have to buy entirely.
    """
    idx = surrogate_ds.train_indices()
    x_t = trigger.apply_trigger_batch(surrogate_ds.x[idx], pattern)
    counts = np.bincount(model.predict_batch(surrogate, x_t),
                         minlength=surrogate_ds.class_count)
    c_star = int(np.argmax(counts))
    target = int(np.argmin(counts))
    if c_star == target:
        target = (target + 1) % surrogate_ds.class_count
    return c_star, target


def train_surrogate(scenario, mixture_cfg, victim_arch, train_cfg, base_seed):
    """Draw the adversary's dataset and train their surrogate model."""
    data_seed = derive_seed(base_seed, "surrogate-data", scenario)
    surrogate_cfg = scenario_mixture(scenario, mixture_cfg, data_seed)
    surrogate_ds = datagen.gaussian_mixture(surrogate_cfg)
    arch = scenario_arch(scenario, victim_arch)
    cfg = dataclasses.replace(train_cfg, seed=derive_seed(base_seed, "surrogate-shuffle",
                                                          scenario))
    params, _ = model.train_erm(surrogate_ds, cfg, arch=arch,
                                init_seed=derive_seed(base_seed, "surrogate-init",
                                                      scenario))
    return params, surrogate_ds


# ---------------------------------------------------------------------------
# absorption sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    records: list
    k_values: tuple
    trials: int
    n_train: int
    slope_all: float
    slope_unsaturated: float
    acc_drop_coeff: float
    dropped_trials: tuple = field(default_factory=tuple)

    def per_k(self, name):
        """Mean of a metric over trials, keyed by k."""
        out = {}
        for k in self.k_values:
            vals = [getattr(r, name) for r in self.records if r.k == k]
            out[k] = float(np.mean(vals))
        return out


def check_nondecreasing(values, tolerance=0.05, allowed_inversions=1):
    """True when a curve rises apart from at most ``allowed_inversions``
    dips no deeper than ``tolerance``."""
    values = [float(v) for v in values]
    inversions = [values[i] - values[i + 1] for i in range(len(values) - 1)
                  if values[i + 1] < values[i]]
    if len(inversions) > allowed_inversions:
        return False
    return all(dip <= tolerance for dip in inversions)


def _fit_line(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape[0] < 2:
        return None
    xc = xs - xs.mean()
    denom = float(np.sum(xc * xc))
    if denom == 0.0:
        return None
    return float(np.sum(xc * (ys - ys.mean())) / denom)


def absorption_slopes(records):
    """Decay slope of log(1 - band_asr + floor) against k, with and without
    saturated budgets (those already within one floor of 1.0)."""
    by_k = {}
    for r in records:
        by_k.setdefault(r.k, []).append(r)
    ks = sorted(by_k)
    points, unsaturated = [], []
    for k in ks:
        rows = by_k[k]
        mean_asr = float(np.mean([r.band_asr for r in rows]))
        mean_size = float(np.mean([max(r.band_size, 1) for r in rows]))
        floor = 1.0 / (2.0 * mean_size)
        y = float(np.log(max(1.0 - mean_asr, floor)))
        points.append((k, y))
        if mean_asr < 1.0 - floor:
            unsaturated.append((k, y))
    slope_all = _fit_line([p[0] for p in points], [p[1] for p in points])
    slope_uns = _fit_line([p[0] for p in unsaturated], [p[1] for p in unsaturated])
    return slope_all, slope_uns


def acc_drop_coefficient(records, n_train):
    """Through-origin fit acc_drop ~ c * (k/N) over the sweep rows."""
    xs = np.array([r.k / n_train for r in records])
    ys = np.array([r.acc_drop for r in records])
    denom = float(np.sum(xs * xs))
    if denom == 0.0:
        return 0.0
    return float(np.sum(xs * ys) / denom)


def absorption_sweep(mixture_cfg, victim_arch, train_cfg, pattern, k_values,
                     trials, base_seed, target_class, mode="dirty",
                     source="band", pair=None, epsilon=None,
                     selection_params=None, margin_threshold=0.5, workers=1):
    """Poison budgets k_values x trials, fresh data and victim per trial.

    Each trial freezes its clean victim, prototypes, and band threshold
    (kappa + radius of triggered train features under the clean victim),
    then scores every k against those fixed references. The k=0 row is the
    clean victim itself, so its acc_drop is exactly zero.
    """
    k_values = tuple(int(k) for k in k_values)
    if len(k_values) == 0 or any(k < 0 for k in k_values):
        raise ValueError("k_values must be non-negative integers")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if pair is None:
        pair = _default_pair(mixture_cfg.class_count, target_class)

    def run_trial(trial):
        data_seed = derive_seed(base_seed, "data", trial)
        ds = datagen.gaussian_mixture(dataclasses.replace(mixture_cfg, seed=data_seed))
        cfg = dataclasses.replace(train_cfg, seed=derive_seed(base_seed, "shuffle", trial))
        init_seed = derive_seed(base_seed, "init", trial)
        victim_clean, _ = model.train_erm(ds, cfg, arch=victim_arch, init_seed=init_seed)

        protos = geometry.prototypes(victim_clean, ds)
        train_idx = ds.clean_train_indices()
        trig_train = trigger.apply_trigger_batch(ds.x[train_idx], pattern)
        feats_train = model.features_batch(victim_clean, trig_train)
        radius, centroid = geometry.cluster_radius(feats_train)
        eps_tilde = geometry.prototype_balance(centroid, protos) + radius

        test = ds.clean_test_indices()
        ca_clean = model.accuracy(victim_clean, ds.x[test], ds.labels[test])
        nu_hat = datagen.margin_density_estimate(ds, victim_clean, margin_threshold)
        clean_feats = model.features_batch(victim_clean, ds.x[train_idx])
        feat_radius = float(np.linalg.norm(clean_feats, axis=1).max())
        hess = influence.clean_hessian(victim_clean, ds, damping="auto", mode="head",
                                       weight_decay=train_cfg.weight_decay)
        n_clean = int(train_idx.shape[0])
        select_model = victim_clean if selection_params is None else selection_params

        rows = []
        for k in k_values:
            if k == 0:
                rec = evaluate(victim_clean, ds, pattern, target_class,
                               ca_clean=ca_clean, band_model=victim_clean,
                               band_protos=protos, band_epsilon_tilde=eps_tilde)
                rec.acc_drop = 0.0
                rho = 0.0
            else:
                plan = PoisonPlan(mode=mode, target_class=target_class, k=k,
                                  pattern=pattern, source=source, pair=pair,
                                  epsilon=epsilon)
                pset = build_poison_set(ds, select_model, plan,
                                        seed=derive_seed(base_seed, "poison", trial, k))
                poisoned = datagen.append_train_records(ds, pset.x, pset.labels)
                victim_k, _ = model.train_erm(poisoned, cfg, arch=victim_arch,
                                              init_seed=init_seed)
                rec = evaluate(victim_k, ds, pattern, target_class,
                               ca_clean=ca_clean, band_model=victim_clean,
                               band_protos=protos, band_epsilon_tilde=eps_tilde)
                est = influence.influence_drift(victim_clean, hess, pset.x,
                                                pset.labels, cfg.learning_rate,
                                                n_clean)
                rho = est.rho
            rec.k = k
            rec.trial = trial
            rec.seed = data_seed
            rec.rho = rho
            rec.gamma_bound = influence.clean_accuracy_bound(nu_hat, feat_radius, rho)
            rows.append(rec)
        return rows

    def guarded(trial):
        try:
            return run_trial(trial)
        except TrainingDiverged as exc:
            log.warning("trial %d dropped: %s", trial, exc)
            return ("dropped", trial, str(exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_trial = list(pool.map(guarded, range(trials)))
    else:
        per_trial = [guarded(t) for t in range(trials)]
    dropped = tuple((rows[1], rows[2]) for rows in per_trial
                    if isinstance(rows, tuple) and rows and rows[0] == "dropped")
    records = [rec for rows in per_trial if not (isinstance(rows, tuple)
                                                 and rows and rows[0] == "dropped")
               for rec in rows]
    records.sort(key=lambda r: (r.k, r.trial))
    for k in k_values:
        if not any(r.k == k for r in records):
            raise ValueError(f"every trial at k={k} diverged; sweep is invalid")

    n_train = int(round(0.8 * mixture_cfg.samples_per_class)) * mixture_cfg.class_count
    slope_all, slope_uns = absorption_slopes(records)
    coeff = acc_drop_coefficient(records, max(n_train, 1))
    return SweepResult(records=records, k_values=k_values, trials=trials,
                       n_train=n_train, slope_all=slope_all,
                       slope_unsaturated=slope_uns, acc_drop_coeff=coeff,
                       dropped_trials=dropped)


def _default_pair(class_count, target_class):
    other = 0 if target_class != 0 else 1
    if other >= class_count:
        raise ValueError("need at least two classes for a band pair")
    return (other, target_class)


def sweep_to_csv(result):
    lines = [CSV_HEADER] + [r.csv_row() for r in result.records]
    return "\n".join(lines) + "\n"


def sweep_summary_json(result, certificate=None):
    """JSON summary: per-k means, fitted slopes, optional certificate verdicts."""
    summary = {
        "k_values": list(result.k_values),
        "trials": result.trials,
        "n_train": result.n_train,
        "dropped_trials": [list(d) for d in result.dropped_trials],
        "slope_all": result.slope_all,
        "slope_unsaturated": result.slope_unsaturated,
        "acc_drop_coeff": result.acc_drop_coeff,
        "per_k": {str(k): {"ca": result.per_k("ca")[k],
                           "acc_drop": result.per_k("acc_drop")[k],
                           "asr": result.per_k("asr")[k],
                           "band_asr": result.per_k("band_asr")[k],
                           "rho": result.per_k("rho")[k],
                           "gamma_bound": result.per_k("gamma_bound")[k]}
                  for k in result.k_values},
    }
    if certificate is not None:
        summary["certificates"] = certificate
    return json.dumps(summary, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def ablation_sweep(parameter, values, mixture_cfg, victim_arch, train_cfg,
                   trigger_cfg, base_seed, target_class, k, scenario="white",
                   mode="dirty", source="band", pair=None):
    """Re-run trigger optimization and a one-trial attack per setting.

    ``parameter`` is ``alpha`` (trigger strength) or ``surrogate_fraction``
    (how much of the adversary's dataset survives); each value yields one
    MetricsRecord tagged by its position.
    """
    if parameter not in ("alpha", "surrogate_fraction"):
        raise ValueError("parameter must be 'alpha' or 'surrogate_fraction'")
    records = []
    for pos, value in enumerate(values):
        surrogate, surrogate_ds = train_surrogate(scenario, mixture_cfg,
                                                  victim_arch, train_cfg, base_seed)
        cfg = dict(trigger_cfg)
        if parameter == "alpha":
            cfg["alpha"] = float(value)
        else:
            surrogate_ds = _subsample_train(surrogate_ds, float(value),
                                            derive_seed(base_seed, "fraction", pos))
            surrogate, _ = model.train_erm(
                surrogate_ds,
                dataclasses.replace(train_cfg,
                                    batch_size=min(train_cfg.batch_size,
                                                   surrogate_ds.train_indices().shape[0]),
                                    seed=derive_seed(base_seed, "frac-shuffle", pos)),
                arch=scenario_arch(scenario, victim_arch),
                init_seed=derive_seed(base_seed, "frac-init", pos))
        pattern, _ = trigger.optimize_trigger(
            surrogate_ds, surrogate, steps=cfg["steps"], batch_size=cfg["batch_size"],
            alpha=cfg["alpha"], delta=cfg["delta"], eta=cfg.get("eta"),
            seed=derive_seed(base_seed, "trigger", pos), objective=cfg["objective"])
        sweep = absorption_sweep(mixture_cfg, victim_arch, train_cfg, pattern,
                                 k_values=(k,), trials=1, base_seed=base_seed,
                                 target_class=target_class, mode=mode,
                                 source=source, pair=pair,
                                 selection_params=surrogate)
        rec = sweep.records[0]
        rec.trial = pos
        records.append(rec)
    return records


def _subsample_train(dataset, fraction, seed):
    """Keep a stratified fraction of train records (all test records stay)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    keep = []
    stream = RandomStream(seed, 31)
    for c in range(dataset.class_count):
        idx = np.where((dataset.split == datagen.SPLIT_TRAIN)
                       & (dataset.labels == c))[0]
        take = max(2, int(round(fraction * idx.shape[0])))
        take = min(take, idx.shape[0])
        keep.append(np.sort(stream.choice(idx, size=take, replace=False)))
    keep.append(dataset.test_indices())
    sel = np.sort(np.concatenate(keep))
    if np.unique(dataset.labels[sel[dataset.split[sel] == datagen.SPLIT_TRAIN]]).shape[0] < 2:
        raise ValueError("subsampled train split lost all but one class")
    return datagen.Dataset(x=dataset.x[sel], labels=dataset.labels[sel],
                           provenance=dataset.provenance[sel],
                           split=dataset.split[sel],
                           class_count=dataset.class_count,
                           warnings=dataset.warnings)


# ---------------------------------------------------------------------------
# concentration checks
# ---------------------------------------------------------------------------

@dataclass
class TailReport:
    """Empirical tail probability against its analytic ceiling."""

    empirical: float
    analytic: float
    trials: int
    passed: bool
    detail: dict = field(default_factory=dict)


def hoeffding_check(k, mu, increment_bound, trials, seed=0, spread=None):
    """Monte Carlo audit of Pr[sum Y < k*mu/2] <= exp(-k mu^2 / (8 B^2)).

    Increments are iid uniform on [mu - spread, mu + spread], the widest
    symmetric choice inside |Y| <= increment_bound by default.
    """
    if k < 1 or trials < 1:
        raise ValueError("k and trials must be >= 1")
    if increment_bound <= 0 or not 0 < mu <= increment_bound:
        raise ValueError("need 0 < mu <= increment_bound and a positive bound")
    if spread is None:
        spread = increment_bound - abs(mu)
    if spread < 0 or abs(mu) + spread > increment_bound * (1 + 1e-12):
        raise ValueError("spread pushes increments outside the bound")
    stream = RandomStream(seed, 101)
    hits = 0
    done = 0
    chunk = max(1, min(trials, int(2e6) // k))
    while done < trials:
        take = min(chunk, trials - done)
        draws = stream.uniform(mu - spread, mu + spread, (take, k))
        hits += int(np.sum(draws.sum(axis=1) < 0.5 * k * mu))
        done += take
    empirical = hits / trials
    analytic = float(np.exp(-k * mu * mu / (8.0 * increment_bound * increment_bound)))
    return TailReport(empirical=float(empirical), analytic=analytic, trials=trials,
                      passed=bool(empirical <= analytic),
                      detail={"k": k, "mu": mu, "increment_bound": increment_bound,
                              "spread": float(spread)})


def radius_concentration_check(features, batch_size, xi, trials, seed=0):
    """Monte Carlo audit of Pr[|R_B - R| > xi] <= 2 exp(-B xi^2 / (8 R_x^2)).

    R is the population mean distance to the population centroid, R_B the
    same mean over a batch of B resamples; per-sample increments are bounded
    by 2 R_x with R_x the largest feature norm, so the stated tail is a
    conservative Hoeffding bound for this statistic.
    """
    features = as_matrix(features, "features")
    if features.shape[0] < 2:
        raise ValueError("need at least 2 feature rows")
    if batch_size < 1 or trials < 1:
        raise ValueError("batch_size and trials must be >= 1")
    if xi <= 0:
        raise ValueError("xi must be > 0")
    centroid = features.mean(axis=0)
    dists = np.linalg.norm(features - centroid, axis=1)
    population = float(dists.mean())
    max_norm = float(np.linalg.norm(features, axis=1).max())
    stream = RandomStream(seed, 202)
    hits = 0
    done = 0
    chunk = max(1, min(trials, int(2e6) // batch_size))
    while done < trials:
        take = min(chunk, trials - done)
        idx = stream.integers(0, features.shape[0], (take, batch_size))
        stats = dists[idx].mean(axis=1)
        hits += int(np.sum(np.abs(stats - population) > xi))
        done += take
    empirical = hits / trials
    if max_norm == 0.0:
        analytic = 0.0
    else:
        analytic = float(2.0 * np.exp(-batch_size * xi * xi / (8.0 * max_norm * max_norm)))
    return TailReport(empirical=float(empirical), analytic=min(analytic, 1.0),
                      trials=trials, passed=bool(empirical <= analytic),
                      detail={"batch_size": batch_size, "xi": float(xi),
                              "population_radius": population, "max_norm": max_norm})
