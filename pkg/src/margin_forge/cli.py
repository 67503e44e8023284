"""Command-line experiment runner.

Every pipeline stage is a subcommand writing deterministic text artifacts
into the config's output directory, plus a run manifest recording the fully
resolved config, a content hash per artifact, and per-stage wall clock. A
stage that needs an earlier stage's artifact builds it on demand, so each
subcommand works standalone on a fresh directory.

Exit codes: 0 success, 1 a verified check failed, 2 config error, 3 runtime
failure. ``MARGIN_FORGE_LOG`` (error|warn|info|debug) sets log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time

from pathlib import Path

import numpy as np

from . import __version__, attack, config, datagen, geometry, influence, model
from . import plotting, trigger
from .config import ConfigError
from .numerics import TrainingDiverged, derive_seed

log = logging.getLogger("margin_forge")

MANIFEST_NAME = "run_manifest.json"

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("MARGIN_FORGE_LOG", "warn").strip().lower()
    level = _LOG_LEVELS.get(name)
    logging.basicConfig(level=level if level is not None else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if level is None and name:
        log.warning("MARGIN_FORGE_LOG=%r is not one of %s; using warn",
                    name, sorted(_LOG_LEVELS))


def _json_text(payload):
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


class Pipeline:
    """Stages over one output directory, with on-demand prerequisites.

    Artifacts are trusted only when the manifest on disk was produced by the
    same resolved config; otherwise every needed stage is rebuilt, so a stale
    directory can never leak results from a different configuration.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = self._load_manifest()
        self._cache = {}

    # -- manifest -----------------------------------------------------------

    def _load_manifest(self):
        path = self.out / MANIFEST_NAME
        if path.exists():
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                data = None
            if (isinstance(data, dict) and data.get("config") == self.cfg.resolved
                    and data.get("version") == __version__):
                return data
            log.info("manifest config differs; rebuilding stages as needed")
        return {"version": __version__, "config": self.cfg.resolved, "stages": {}}

    def _write(self, relpath, text):
        with open(self.out / relpath, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return relpath

    def _finish(self, stage, artifacts, started):
        entry = {"wall_clock_s": round(time.perf_counter() - started, 6),
                 "artifacts": {}}
        for rel in sorted(artifacts):
            digest = hashlib.sha256((self.out / rel).read_bytes()).hexdigest()
            entry["artifacts"][rel] = f"sha256:{digest}"
        self.manifest["stages"][stage] = entry
        self._write(MANIFEST_NAME, _json_text(self.manifest))
        for rel in sorted(artifacts):
            print(f"wrote {self.out / rel}")

    def _have(self, stage, *relpaths):
        return (stage in self.manifest["stages"]
                and all((self.out / rel).exists() for rel in relpaths))

    # -- gen-data -----------------------------------------------------------

    def run_gen_data(self):
        t0 = time.perf_counter()
        mix = self.cfg.mixture(derive_seed(self.cfg.base_seed, "dataset"))
        ds = datagen.gaussian_mixture(mix)
        datagen.save_dataset(ds, self.out / "dataset.txt")
        self._cache["dataset"] = ds
        self._finish("gen-data", ["dataset.txt"], t0)
        return 0

    def dataset(self):
        if "dataset" not in self._cache:
            if self._have("gen-data", "dataset.txt"):
                self._cache["dataset"] = datagen.load_dataset(self.out / "dataset.txt")
            else:
                self.run_gen_data()
        return self._cache["dataset"]

    # -- train --------------------------------------------------------------

    def run_train(self):
        t0 = time.perf_counter()
        ds = self.dataset()
        base = self.cfg.base_seed
        cfg_t = self.cfg.train(seed=derive_seed(base, "victim-shuffle"))
        params, losses = model.train_erm(ds, cfg_t, arch=self.cfg.arch(),
                                         init_seed=derive_seed(base, "victim-init"))
        model.save_model(params, self.out / "victim_clean.txt",
                         fingerprint={"role": "victim-clean", "base_seed": base})
        rows = ["epoch,loss"] + [f"{i},{float(v)!r}" for i, v in enumerate(losses)]
        self._write("train_loss.csv", "\n".join(rows) + "\n")
        self._cache["victim"] = params
        self._finish("train", ["victim_clean.txt", "train_loss.csv"], t0)
        return 0

    def victim(self):
        if "victim" not in self._cache:
            if self._have("train", "victim_clean.txt"):
                self._cache["victim"], _ = model.load_model(self.out / "victim_clean.txt")
            else:
                self.run_train()
        return self._cache["victim"]

    # -- trigger-opt --------------------------------------------------------

    def run_trigger_opt(self):
        t0 = time.perf_counter()
        base = self.cfg.base_seed
        surrogate, surrogate_ds = attack.train_surrogate(
            self.cfg.scenario, self.cfg.mixture(0), self.cfg.arch(),
            self.cfg.train(), base)
        pattern, trace = trigger.optimize_trigger(
            surrogate_ds, surrogate, seed=derive_seed(base, "trigger"),
            **self.cfg.trigger_kwargs())

        lips = model.lipschitz_bound(surrogate)
        cert = trigger.convergence_certificate(trace, pattern.alpha, lips)
        descent = None
        if trace.full_batch:
            d = trigger.descent_inequality_check(trace)
            descent = {"fraction_satisfied": d.fraction_satisfied,
                       "worst_violation": d.worst_violation, "steps": d.steps}
        classes = self._resolve_classes(surrogate, surrogate_ds, pattern)
        report = {
            "alpha": pattern.alpha, "delta": pattern.delta,
            "objective": trace.objective, "steps": trace.steps,
            "full_batch": trace.full_batch, "final_loss": trace.final_loss,
            "lipschitz": lips,
            "certificate": {"passed": cert.passed, "bound": cert.bound,
                            "min_grad_sq": cert.min_grad_sq,
                            "initial_loss": cert.initial_loss,
                            "best_loss": cert.best_loss,
                            "eta_consistent": cert.eta_consistent},
            "descent": descent,
            "classes": classes,
        }
        model.save_model(surrogate, self.out / "surrogate_model.txt",
                         fingerprint={"role": "surrogate",
                                      "scenario": self.cfg.scenario,
                                      "base_seed": base})
        trigger.save_trigger(pattern, self.out / "trigger.txt")
        trigger.save_trace(trace, self.out / "trigger_trace.csv")
        self._write("trigger_report.json", _json_text(report))
        self._cache.update(surrogate=surrogate, surrogate_ds=surrogate_ds,
                           pattern=pattern, trace=trace, trigger_report=report)
        self._finish("trigger-opt", ["surrogate_model.txt", "trigger.txt",
                                     "trigger_trace.csv", "trigger_report.json"], t0)
        return 0

    def _resolve_classes(self, surrogate, surrogate_ds, pattern):
        c_star, auto_target = attack.select_attack_classes(surrogate, surrogate_ds,
                                                           pattern)
        target = self.cfg.attack["target_class"]
        target = auto_target if target == "auto" else int(target)
        pair = self.cfg.attack["pair"]
        if pair == "auto":
            other = c_star
            if other == target:
                other = next(c for c in range(surrogate_ds.class_count)
                             if c != target)
            pair = [other, target]
        return {"c_star": c_star, "target_class": target,
                "pair": [int(pair[0]), int(pair[1])]}

    def trigger_assets(self):
        if "pattern" not in self._cache:
            if self._have("trigger-opt", "trigger.txt", "trigger_report.json",
                          "surrogate_model.txt"):
                self._cache["pattern"] = trigger.load_trigger(self.out / "trigger.txt")
                self._cache["trigger_report"] = json.loads(
                    (self.out / "trigger_report.json").read_text(encoding="utf-8"))
                self._cache["surrogate"], _ = model.load_model(
                    self.out / "surrogate_model.txt")
            else:
                self.run_trigger_opt()
        return (self._cache["pattern"], self._cache["trigger_report"],
                self._cache["surrogate"])

    # -- attack -------------------------------------------------------------

    def run_attack(self):
        t0 = time.perf_counter()
        ds = self.dataset()
        victim_clean = self.victim()
        pattern, report, surrogate = self.trigger_assets()
        atk = self.cfg.attack
        target = report["classes"]["target_class"]
        pair = tuple(report["classes"]["pair"])
        base = self.cfg.base_seed

        plan = attack.PoisonPlan(mode=atk["mode"], target_class=target,
                                 k=atk["k"], pattern=pattern,
                                 source=atk["source"], pair=pair,
                                 epsilon=atk["epsilon"])
        pset = attack.build_poison_set(ds, surrogate, plan,
                                       seed=derive_seed(base, "poison"))
        poisoned_ds = datagen.append_train_records(ds, pset.x, pset.labels)
        cfg_t = self.cfg.train(seed=derive_seed(base, "victim-shuffle"))
        init_seed = derive_seed(base, "victim-init")
        victim_bad, _ = model.train_erm(poisoned_ds, cfg_t, arch=self.cfg.arch(),
                                        init_seed=init_seed)

        protos = geometry.prototypes(victim_clean, ds)
        train_idx = ds.clean_train_indices()
        trig_feats = model.features_batch(
            victim_clean, trigger.apply_trigger_batch(ds.x[train_idx], pattern))
        radius, centroid = geometry.cluster_radius(trig_feats)
        eps_tilde = geometry.prototype_balance(centroid, protos) + radius
        test = ds.clean_test_indices()
        ca_clean = model.accuracy(victim_clean, ds.x[test], ds.labels[test])
        rec = attack.evaluate(victim_bad, ds, pattern, target, ca_clean=ca_clean,
                              band_model=victim_clean, band_protos=protos,
                              band_epsilon_tilde=eps_tilde)

        rho = 0.0
        drift_norm = 0.0
        if pset.k > 0:
            hess = influence.clean_hessian(victim_clean, ds, damping="auto",
                                           mode="head",
                                           weight_decay=cfg_t.weight_decay)
            est = influence.influence_drift(victim_clean, hess, pset.x,
                                            pset.labels, cfg_t.learning_rate,
                                            int(train_idx.shape[0]))
            rho = est.rho
            drift_norm = est.drift_norm
        nu_hat = datagen.margin_density_estimate(ds, victim_clean,
                                                 atk["margin_threshold"])
        clean_feats = model.features_batch(victim_clean, ds.x[train_idx])
        feat_radius = float(np.linalg.norm(clean_feats, axis=1).max())
        gamma = influence.clean_accuracy_bound(nu_hat, feat_radius, rho)

        model.save_model(victim_bad, self.out / "victim_poisoned.txt",
                         fingerprint={"role": "victim-poisoned", "k": pset.k,
                                      "base_seed": base})
        payload = {"k": pset.k, "mode": atk["mode"], "source": atk["source"],
                   "target_class": target, "pair": list(pair),
                   "ca_clean": ca_clean, "ca": rec.ca, "acc_drop": rec.acc_drop,
                   "asr": rec.asr, "band_asr": rec.band_asr,
                   "band_size": rec.band_size, "band_epsilon_tilde": eps_tilde,
                   "rho": rho, "drift_norm": drift_norm, "gamma_bound": gamma,
                   "poison_sources": [int(i) for i in pset.source_indices],
                   "notes": list(pset.notes) + list(rec.notes)}
        self._write("attack_report.json", _json_text(payload))
        self._finish("attack", ["victim_poisoned.txt", "attack_report.json"], t0)
        return 0

    # -- sweep --------------------------------------------------------------

    def run_sweep(self):
        t0 = time.perf_counter()
        pattern, report, surrogate = self.trigger_assets()
        atk = self.cfg.attack
        target = report["classes"]["target_class"]
        pair = tuple(report["classes"]["pair"])
        result = attack.absorption_sweep(
            self.cfg.mixture(0), self.cfg.arch(), self.cfg.train(), pattern,
            k_values=atk["k_values"], trials=atk["trials"],
            base_seed=self.cfg.base_seed, target_class=target,
            mode=atk["mode"], source=atk["source"], pair=pair,
            epsilon=atk["epsilon"], selection_params=surrogate,
            margin_threshold=atk["margin_threshold"], workers=self.cfg.workers)
        verdicts = {"convergence": report["certificate"],
                    "descent": report["descent"]}
        self._write("metrics.csv", attack.sweep_to_csv(result))
        self._write("summary.json",
                    attack.sweep_summary_json(result, certificate=verdicts))
        self._cache["sweep"] = result
        self._finish("sweep", ["metrics.csv", "summary.json"], t0)
        return 0

    # -- plot ---------------------------------------------------------------

    def run_plot(self):
        t0 = time.perf_counter()
        if not self._have("sweep", "metrics.csv"):
            self.run_sweep()
        ks, means = self._metric_means((self.out / "metrics.csv").read_text(
            encoding="utf-8"))
        plotting.emit_plot(
            [("band_asr", ks, means["band_asr"]), ("asr", ks, means["asr"])],
            "line", self.out / "absorption_curve.svg",
            title="Trigger flip rate vs poison budget", x_label="poisons k",
            y_label="flip rate")
        plotting.emit_plot(
            [("CA", ks, means["CA"]), ("acc_drop", ks, means["acc_drop"])],
            "line", self.out / "clean_accuracy.svg",
            title="Clean accuracy vs poison budget", x_label="poisons k",
            y_label="accuracy")
        self._finish("plot", ["absorption_curve.svg", "clean_accuracy.svg"], t0)
        return 0

    @staticmethod
    def _metric_means(text):
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("metrics.csv holds no rows")
        ks = sorted({int(r["k"]) for r in rows})
        names = ("CA", "acc_drop", "asr", "band_asr")
        means = {name: [] for name in names}
        for k in ks:
            sub = [r for r in rows if int(r["k"]) == k]
            for name in names:
                means[name].append(float(np.mean([float(r[name]) for r in sub])))
        return ks, means

    # -- verify -------------------------------------------------------------

    def run_verify(self):
        t0 = time.perf_counter()
        checks = [self._check_trigger_certificates,
                  self._check_band_inclusion,
                  self._check_hoeffding,
                  self._check_radius_concentration,
                  self._check_influence_vs_retrain]
        results = {}
        for check in checks:
            results.update(check())
        for name in sorted(results):
            entry = results[name]
            print(f"{'PASS' if entry['passed'] else 'FAIL'} {name}: {entry['detail']}")
        self._write("verify_report.json", _json_text(results))
        self._finish("verify", ["verify_report.json"], t0)
        return 0 if all(e["passed"] for e in results.values()) else 1

    def _check_trigger_certificates(self):
        pattern, report, _ = self.trigger_assets()
        cert = report["certificate"]
        out = {"convergence-certificate": {
            "passed": bool(cert["passed"]),
            "detail": f"min ||g||^2 {cert['min_grad_sq']:.3e} vs "
                      f"bound {cert['bound']:.3e}"}}
        descent = report["descent"]
        if descent is None:
            out["descent-inequality"] = {
                "passed": True,
                "detail": "skipped: mini-batch trace has no exact step losses"}
        else:
            frac = descent["fraction_satisfied"]
            out["descent-inequality"] = {
                "passed": bool(frac >= 0.99),
                "detail": f"{frac:.4f} of steps meet the (eta/2)||g||^2 floor"}
        return out

    def _band_features(self):
        ds = self.dataset()
        victim = self.victim()
        pattern, _, _ = self.trigger_assets()
        idx = ds.clean_train_indices()
        feats = model.features_batch(victim,
                                     trigger.apply_trigger_batch(ds.x[idx], pattern))
        return ds, victim, feats

    def _check_band_inclusion(self):
        ds, victim, feats = self._band_features()
        protos = geometry.prototypes(victim, ds)
        radius, centroid = geometry.cluster_radius(feats)
        kappa = geometry.prototype_balance(centroid, protos)
        report = geometry.multiclass_band_check(feats, protos, kappa + radius + 1e-9)
        sym_loss = trigger.agg_loss_symmetric(feats)
        analytic = trigger.radius_from_eps(feats.shape[0], sym_loss)
        ok = (report.all_inside
              and radius <= analytic + 1e-9
              and report.max_abs_projection <= kappa + analytic + 1e-9)
        detail = (f"max offset {report.max_abs_projection:.6f} vs kappa+r "
                  f"{kappa + radius:.6f}, analytic radius {analytic:.6f} "
                  f"vs empirical {radius:.6f}")
        return {"band-inclusion": {"passed": bool(ok), "detail": detail}}

    def _check_hoeffding(self):
        base = self.cfg.base_seed
        grid = [(20, 0.5, 1.0), (60, 0.25, 1.0)]
        worst = None
        ok = True
        for i, (k, mu, bound) in enumerate(grid):
            rep = attack.hoeffding_check(k, mu, bound, trials=20000,
                                         seed=derive_seed(base, "verify-hoeffding", i))
            ok = ok and rep.passed
            if worst is None or rep.empirical - rep.analytic > worst[0]:
                worst = (rep.empirical - rep.analytic, rep)
        rep = worst[1]
        detail = (f"worst grid point: empirical {rep.empirical:.4g} vs "
                  f"analytic {rep.analytic:.4g}")
        return {"hoeffding-tail": {"passed": bool(ok), "detail": detail}}

    def _check_radius_concentration(self):
        _, _, feats = self._band_features()
        r_x = float(np.linalg.norm(feats, axis=1).max())
        batch = min(16, feats.shape[0])
        rep = attack.radius_concentration_check(
            feats, batch, xi=0.8 * r_x, trials=20000,
            seed=derive_seed(self.cfg.base_seed, "verify-radius"))
        detail = (f"empirical {rep.empirical:.4g} vs analytic {rep.analytic:.4g} "
                  f"at batch {batch}")
        return {"radius-concentration": {"passed": bool(rep.passed),
                                         "detail": detail}}

    def _check_influence_vs_retrain(self):
        base = self.cfg.base_seed
        mix = datagen.MixtureConfig(class_count=2, dim=2, samples_per_class=31,
                                    means=datagen.circle_means(2, 4.0, 2),
                                    covariance_scale=0.5,
                                    seed=derive_seed(base, "verify-data"))
        ds = datagen.gaussian_mixture(mix)
        arch = model.ArchSpec(input_dim=2, class_count=2, hidden=(),
                              feature_dim=None)
        cfg_t = model.TrainConfig(epochs=200, batch_size=10, learning_rate=0.1,
                                  seed=derive_seed(base, "verify-shuffle"))
        init_seed = derive_seed(base, "verify-init")
        idx = ds.clean_train_indices()
        donors = idx[ds.labels[idx] == 0][:3]
        poison_x = ds.x[donors]
        poison_y = np.ones(donors.shape[0], dtype=np.int64)

        oracle = influence.retrain_oracle(ds, poison_x, poison_y, cfg_t,
                                          arch=arch, init_seed=init_seed)
        hess = influence.clean_hessian(oracle.clean, ds, damping="auto",
                                       mode="head")
        est = influence.influence_drift(oracle.clean, hess, poison_x, poison_y,
                                        cfg_t.learning_rate, int(idx.shape[0]))
        denom = np.linalg.norm(est.delta_theta) * np.linalg.norm(oracle.delta)
        cos = float(np.dot(est.delta_theta, oracle.delta) / denom) if denom else 0.0
        within = est.drift_norm <= est.rho * (1 + 1e-6)
        detail = (f"cosine {cos:.4f} (need >= 0.9), drift {est.drift_norm:.4g} "
                  f"vs rho {est.rho:.4g}")
        return {"influence-vs-retrain": {"passed": bool(cos >= 0.9 and within),
                                         "detail": detail}}


COMMANDS = {
    "gen-data": Pipeline.run_gen_data,
    "train": Pipeline.run_train,
    "trigger-opt": Pipeline.run_trigger_opt,
    "attack": Pipeline.run_attack,
    "sweep": Pipeline.run_sweep,
    "verify": Pipeline.run_verify,
    "plot": Pipeline.run_plot,
}


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="JSON config file (defaults used when omitted)")
    common.add_argument("--seed", type=int, default=None,
                        help="override base_seed")
    common.add_argument("--out", default=None, help="override output_dir")
    common.add_argument("--workers", type=int, default=None,
                        help="override sweep worker count")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override one config field (repeatable), e.g. "
                             "--set trigger.alpha=0.5")
    parser = argparse.ArgumentParser(
        prog="margin-forge",
        description="Boundary-band backdoor laboratory: data, victims, "
                    "triggers, poisoning sweeps, and theory checks.")
    parser.add_argument("--version", action="version",
                        version=f"margin-forge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "draw the Gaussian-mixture dataset",
        "train": "train the clean victim on the dataset",
        "trigger-opt": "train the scenario surrogate and optimize the trigger",
        "attack": "poison once at attack.k and retrain the victim",
        "sweep": "run the k x trials poisoning sweep",
        "verify": "run every theory check; exit 1 if any fails",
        "plot": "render sweep curves as SVG",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None):
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        if args.config is not None:
            cfg = config.load_config(args.config, overrides=args.overrides,
                                     seed=args.seed, out=args.out,
                                     workers=args.workers)
        else:
            cfg = config.resolve_config(overrides=args.overrides,
                                        seed=args.seed, out=args.out,
                                        workers=args.workers)
        pipeline = Pipeline(cfg)
        return COMMANDS[args.command](pipeline)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
