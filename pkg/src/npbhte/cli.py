"""Command line interface.

Subcommands cover the full workflow: ``synth`` draws a benchmark table,
``expand`` turns raw count variables into the indicator design, ``ate``
reports unadjusted and adjusted effect posteriors, ``lin-hte`` samples
the arm-wise projection contrast, and ``tree``/``forest`` fit effect
trees and their posterior ensembles.

Values resolve flag > config file > default. All emissions are
deterministic given the seed: report JSON is key-sorted with full-
precision floats, CSVs parse back through the package reader, and worker
-thread count never changes bytes. Exit codes: 2 usage or config, 3
data, 4 rank deficiency, 5 invalid values, 6 replicate failures.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np
import yaml

from .ate import compute_ate_report, intercept_in_span
from .cart import TreeConfig, fit_tree, tot_transform, tree_to_dict
from .data import (
    ColumnSchema,
    ExperimentTable,
    SynthConfig,
    build_expansion,
    apply_expansion,
    generate_synthetic,
    load_csv,
    write_csv,
)
from .dgp import SeedSpec, posterior_mean_weights
from .errors import ConfigError, DataError, NpbhteError, RankDeficiencyError, ReplicateError
from .forest import (
    EffectSelector,
    WeightScheme,
    fit_group_forests,
    fit_tot_forest,
    forest_to_dict,
    hte_summary,
    split_probabilities,
)
from .linproj import hte_linear, stratified_moments

SCHEMA_VERSION = 1

_TOP_KEYS = {
    "input", "out", "seed", "boot", "schema",
    "expand", "lin_hte", "tree", "forest", "synth",
}
_SCHEMA_KEYS = {"response", "treatment", "features", "q", "treated_value", "control_value"}


def _load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return raw


@dataclass
class RunConfig:
    """Resolved settings for one command invocation."""

    command: str
    input: str | None
    out: str
    seed: SeedSpec
    boot: int
    q: float | None
    max_depth: int | None
    min_leaf: int | None
    mtry: int | None
    tot: bool | None
    schema: ColumnSchema
    sections: dict

    @staticmethod
    def from_args(args: argparse.Namespace) -> "RunConfig":
        file_cfg = _load_config_file(args.config) if args.config else {}

        def pick(flag, *keys, default=None):
            if flag is not None:
                return flag
            node = file_cfg
            for k in keys:
                if not isinstance(node, dict) or k not in node:
                    return default
                node = node[k]
            return node if node is not None else default

        schema_cfg = file_cfg.get("schema") or {}
        if not isinstance(schema_cfg, dict):
            raise ConfigError("schema section must be a mapping")
        unknown = set(schema_cfg) - _SCHEMA_KEYS
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        features = schema_cfg.get("features")
        schema = ColumnSchema(
            response=str(schema_cfg.get("response", "y")),
            treatment=str(schema_cfg.get("treatment", "d")),
            features=tuple(str(f) for f in features) if features else None,
            q=None,  # resolved q is tracked separately so --q can override
            treated_value=schema_cfg.get("treated_value"),
            control_value=schema_cfg.get("control_value"),
        )
        q = args.q if args.q is not None else schema_cfg.get("q")

        seed_val = pick(args.seed, "seed", default=0)
        boot = pick(args.boot, "boot", default=1000)
        try:
            seed = SeedSpec(int(seed_val))
            boot = int(boot)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad seed/boot value: {exc}") from exc
        if boot < 0:
            raise ConfigError("boot must be nonnegative")

        return RunConfig(
            command=args.command,
            input=pick(args.input, "input"),
            out=pick(args.out, "out", default="npbhte_out"),
            seed=seed,
            boot=boot,
            q=None if q is None else float(q),
            max_depth=pick(args.max_depth, "tree", "max_depth"),
            min_leaf=pick(args.min_leaf, "tree", "min_leaf"),
            mtry=pick(args.mtry, "tree", "mtry"),
            tot=pick(args.tot, "tree", "tot"),
            schema=schema,
            sections=file_cfg,
        )

    def section(self, name: str) -> dict:
        node = self.sections.get(name) or {}
        if not isinstance(node, dict):
            raise ConfigError(f"{name} section must be a mapping")
        return node

    def tree_config(self) -> TreeConfig:
        try:
            return TreeConfig(
                max_depth=self.max_depth if self.max_depth is not None else 5,
                min_leaf=self.min_leaf if self.min_leaf is not None else 100_000,
                mtry=self.mtry,
                seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


class _Outputs:
    """Tracks written files so a failing command leaves nothing behind."""

    def __init__(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        self.out_dir = out_dir
        self.written: list[str] = []

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_json(self, name: str, obj: dict) -> str:
        p = self.path(name)
        with open(p, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.written.append(p)
        print(f"wrote {p}")
        return p

    def write_csv(self, name: str, header, rows) -> str:
        p = self.path(name)
        write_csv(p, header, rows)
        self.written.append(p)
        print(f"wrote {p}")
        return p

    def discard_all(self) -> None:
        for p in self.written:
            try:
                os.unlink(p)
            except OSError:
                pass


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _require_input(cfg: RunConfig) -> str:
    if not cfg.input:
        raise ConfigError(f"{cfg.command} needs --input (or 'input' in the config)")
    return cfg.input


def _load_table(cfg: RunConfig, add_intercept: bool) -> ExperimentTable:
    path = _require_input(cfg)
    schema = cfg.schema
    if cfg.q is not None:
        schema = ColumnSchema(
            response=schema.response, treatment=schema.treatment, features=schema.features,
            q=cfg.q, treated_value=schema.treated_value, control_value=schema.control_value,
        )
    table = load_csv(path, schema)
    if (
        add_intercept
        and "intercept" not in table.feature_names
        and not intercept_in_span(table.X)
    ):
        X = np.column_stack([np.ones(table.n), table.X])
        table = ExperimentTable(
            y=table.y, d=table.d, X=X,
            feature_names=("intercept",) + table.feature_names, q=table.q,
        )
    return table


def _moments_dict(mean: float, variance: float) -> dict:
    return {"mean": float(mean), "variance": float(variance), "sd": math.sqrt(max(0.0, variance))}


def _draw_summary(draws: np.ndarray) -> dict:
    p10, p90 = (float(v) for v in np.percentile(draws, [10.0, 90.0]))
    return {
        "mean": float(np.mean(draws)),
        "sd": float(np.std(draws, ddof=1)) if draws.size > 1 else 0.0,
        "p10": p10,
        "p90": p90,
    }


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(cfg: RunConfig, out: _Outputs) -> None:
    section = cfg.section("synth")
    known = {
        "n", "q", "zero_mass", "spikes", "tail_log_mean", "tail_log_sd",
        "effect_coefficients", "factor_loading", "covariate_log_sd",
        "covariate_activity",
    }
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
    try:
        scfg = SynthConfig(
            n=int(section.get("n", 10_000)),
            q=cfg.q if cfg.q is not None else float(section.get("q", 0.5)),
            zero_mass=float(section.get("zero_mass", 0.6)),
            spikes=tuple((float(v), float(m)) for v, m in section.get("spikes", [(1.0, 0.1)])),
            tail_log_mean=float(section.get("tail_log_mean", 1.0)),
            tail_log_sd=float(section.get("tail_log_sd", 1.0)),
            effect_coefficients=tuple(float(c) for c in section.get("effect_coefficients", (0.5, 0.25))),
            factor_loading=float(section.get("factor_loading", 0.5)),
            covariate_log_sd=float(section.get("covariate_log_sd", 1.0)),
            covariate_activity=float(section.get("covariate_activity", 0.8)),
            seed=cfg.seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc

    synth = generate_synthetic(scfg)
    table = synth.table
    covariates = [name for name in table.feature_names if name != "intercept"]
    cols = [table.feature_names.index(name) for name in covariates]
    out.write_csv(
        "synthetic.csv",
        ["y", "d"] + covariates,
        (
            [float(table.y[i]), int(table.d[i])] + [float(v) for v in table.X[i, cols]]
            for i in range(table.n)
        ),
    )
    out.write_csv(
        "synthetic_truth.csv",
        ["control_outcome", "treated_outcome", "cate"],
        (
            [float(synth.control_outcome[i]), float(synth.treated_outcome[i]), float(synth.cate[i])]
            for i in range(table.n)
        ),
    )
    out.write_json(
        "synth_report.json",
        {
            "schema_version": SCHEMA_VERSION,
            "command": "synth",
            "n": table.n,
            "n_treated": table.n_treated,
            "n_control": table.n_control,
            "q": scfg.q,
            "true_ate": synth.true_ate,
            "seed": cfg.seed.to_dict(),
            "config": {
                "zero_mass": scfg.zero_mass,
                "spikes": [[v, m] for v, m in scfg.spikes],
                "tail_log_mean": scfg.tail_log_mean,
                "tail_log_sd": scfg.tail_log_sd,
                "effect_coefficients": list(scfg.effect_coefficients),
                "factor_loading": scfg.factor_loading,
                "covariate_log_sd": scfg.covariate_log_sd,
                "covariate_activity": scfg.covariate_activity,
            },
        },
    )
    print(f"n={table.n} treated={table.n_treated} control={table.n_control} "
          f"true_ate={_fmt(synth.true_ate)}")


def cmd_expand(cfg: RunConfig, out: _Outputs) -> None:
    path = _require_input(cfg)
    section = cfg.section("expand")
    with_intercept = bool(section.get("with_intercept", True))
    table = _load_table(cfg, add_intercept=False)
    plan = build_expansion(table.X, table.feature_names)
    design = apply_expansion(table.X, plan, with_intercept=with_intercept)
    names = plan.column_names(with_intercept)

    out.write_json(
        "expansion_plan.json",
        {
            "schema_version": SCHEMA_VERSION,
            "command": "expand",
            "input": os.path.basename(path),
            "with_intercept": with_intercept,
            "plan": plan.to_dict(),
        },
    )
    resp, treat = cfg.schema.response, cfg.schema.treatment
    out.write_csv(
        "expanded.csv",
        [resp, treat] + list(names),
        (
            [float(table.y[i]), int(table.d[i])] + [int(v) for v in design[i]]
            for i in range(table.n)
        ),
    )
    n_ind = sum(len(v.indicators) for v in plan.variables)
    print(f"expanded {len(plan.variables)} variables into {n_ind} indicators "
          f"({design.shape[1]} columns with intercept)" if with_intercept else
          f"expanded {len(plan.variables)} variables into {n_ind} indicators")


def cmd_ate(cfg: RunConfig, out: _Outputs) -> None:
    table = _load_table(cfg, add_intercept=True)
    report = compute_ate_report(table, B=cfg.boot, seed=cfg.seed)
    taylor = report.adjusted_taylor
    dec = taylor.decomposition

    def arm_terms(t):
        return {
            "group_mean": t.group_mean,
            "r2_reduction": t.r2_reduction,
            "mean_shift": t.mean_shift,
            "cross": t.cross,
            "total": t.total,
        }

    body = {
        "schema_version": SCHEMA_VERSION,
        "command": "ate",
        "input": os.path.basename(_require_input(cfg)),
        "n": table.n,
        "n_treated": table.n_treated,
        "n_control": table.n_control,
        "q": table.q,
        "boot": cfg.boot,
        "seed": cfg.seed.to_dict(),
        "unadjusted": _moments_dict(report.unadjusted.mean, report.unadjusted.variance),
        "adjusted_taylor": {
            **_moments_dict(taylor.moments.mean, taylor.moments.variance),
            "rough_variance": taylor.rough_variance,
            "r2_treated": taylor.fit_treated.r2,
            "r2_control": taylor.fit_control.r2,
            "decomposition": {
                "treated": arm_terms(dec.treated),
                "control": arm_terms(dec.control),
                "total": dec.total,
                "without_cross": dec.without_cross,
            },
        },
        "adjusted_bootstrap": None,
        "variance_reduction": {
            "unadjusted_variance": report.reduction.unadjusted_variance,
            "adjusted_variance": report.reduction.adjusted_variance,
            "absolute": report.reduction.absolute,
            "relative": report.reduction.relative,
            "predicted_absolute": report.reduction.predicted_absolute,
            "predicted_relative": report.reduction.predicted_relative,
        },
    }
    if report.adjusted_bootstrap is not None:
        boot = report.adjusted_bootstrap
        body["adjusted_bootstrap"] = {
            **_moments_dict(boot.moments.mean, boot.moments.variance),
            "draws": int(boot.draws.size),
            "redraws": boot.redraw_count,
        }
        out.write_csv(
            "ate_draws.csv",
            ["replicate", "adjusted_ate"],
            ([b, float(v)] for b, v in enumerate(boot.draws)),
        )
    out.write_json("ate_report.json", body)

    print(f"n={table.n} treated={table.n_treated} control={table.n_control}")
    print(f"unadjusted        mean={_fmt(report.unadjusted.mean)} sd={_fmt(report.unadjusted.sd)}")
    print(f"adjusted (taylor) mean={_fmt(taylor.moments.mean)} sd={_fmt(taylor.moments.sd)}")
    if report.adjusted_bootstrap is not None:
        bm = report.adjusted_bootstrap.moments
        print(f"adjusted (boot)   mean={_fmt(bm.mean)} sd={_fmt(bm.sd)} B={cfg.boot}")
    print(f"variance reduction: {report.reduction.relative * 100:.2f}% realized, "
          f"{report.reduction.predicted_relative * 100:.2f}% predicted")


def _contour_rows(mean2: np.ndarray, cov2: np.ndarray, levels, points: int):
    """Polyline vertices for equal-density ellipses of a bivariate normal.

    Levels are fractions of the density maximum: the level-f contour is
    the ellipse (x - m)' S^{-1} (x - m) = -2 log f.
    """
    vals, vecs = np.linalg.eigh(cov2)
    vals = np.clip(vals, 0.0, None)
    L = vecs @ np.diag(np.sqrt(vals))
    angles = np.linspace(0.0, 2.0 * math.pi, points + 1)
    circle = np.column_stack([np.cos(angles), np.sin(angles)])
    for level in levels:
        radius = math.sqrt(-2.0 * math.log(level))
        pts = mean2[None, :] + radius * (circle @ L.T)
        for v, (a, b) in enumerate(pts):
            yield [float(level), v, float(a), float(b)]


def cmd_lin_hte(cfg: RunConfig, out: _Outputs) -> None:
    table = _load_table(cfg, add_intercept=True)
    section = cfg.section("lin_hte")
    known = {"strata", "contour_features", "contour_levels", "contour_points", "seed_control"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown lin_hte keys: {sorted(unknown)}")

    seed_control = None
    if section.get("seed_control") is not None:
        seed_control = SeedSpec(int(section["seed_control"]))
    summary = hte_linear(table, B=cfg.boot, seed=cfg.seed, seed_control=seed_control)
    sds = np.sqrt(np.clip(np.diag(summary.delta_cov), 0.0, None))

    body = {
        "schema_version": SCHEMA_VERSION,
        "command": "lin-hte",
        "input": os.path.basename(_require_input(cfg)),
        "n": table.n,
        "n_treated": table.n_treated,
        "n_control": table.n_control,
        "boot": cfg.boot,
        "seed": cfg.seed.to_dict(),
        "r2_treated": summary.fit_treated.r2,
        "r2_control": summary.fit_control.r2,
        "coefficients": [
            {
                "feature": name,
                "delta_mean": float(summary.delta_mean[j]),
                "sd": float(sds[j]),
                "beta_treated": float(summary.fit_treated.beta[j]),
                "beta_control": float(summary.fit_control.beta[j]),
            }
            for j, name in enumerate(summary.feature_names)
        ],
        "delta_cov": [[float(v) for v in row] for row in summary.delta_cov],
        "strata": None,
    }

    strata = section.get("strata")
    if strata:
        effects = stratified_moments(table, [str(s) for s in strata])
        body["strata"] = [
            {
                "name": e.name,
                "n_treated": e.n_treated,
                "n_control": e.n_control,
                "treated": _moments_dict(e.treated.mean, e.treated.variance),
                "control": _moments_dict(e.control.mean, e.control.variance),
                "effect": _moments_dict(e.effect.mean, e.effect.variance),
            }
            for e in effects
        ]

    out.write_json("lin_hte_report.json", body)

    if summary.draws is not None:
        out.write_csv(
            "lin_hte_draws.csv",
            list(summary.feature_names),
            ([float(v) for v in row] for row in summary.draws),
        )

    contour_feats = section.get("contour_features")
    if contour_feats is None:
        contour_feats = [n for n in summary.feature_names if n != "intercept"][:2]
    if len(contour_feats) == 2:
        try:
            ia = summary.feature_names.index(str(contour_feats[0]))
            ib = summary.feature_names.index(str(contour_feats[1]))
        except ValueError as exc:
            raise ConfigError(f"contour feature not in design: {exc}") from exc
        levels = [float(v) for v in section.get("contour_levels", (0.1, 0.01, 0.001))]
        if any(not 0.0 < v < 1.0 for v in levels):
            raise ConfigError("contour levels must lie in (0, 1)")
        points = int(section.get("contour_points", 128))
        idx = np.array([ia, ib])
        out.write_csv(
            "lin_hte_contours.csv",
            ["level", "vertex", str(contour_feats[0]), str(contour_feats[1])],
            _contour_rows(summary.delta_mean[idx], summary.delta_cov[np.ix_(idx, idx)], levels, points),
        )

    top = max(
        (j for j in range(len(summary.feature_names))),
        key=lambda j: abs(summary.delta_mean[j]),
    )
    print(f"fitted {len(summary.feature_names)} coefficients per arm "
          f"(r2 treated={_fmt(summary.fit_treated.r2)}, control={_fmt(summary.fit_control.r2)})")
    print(f"largest contrast: {summary.feature_names[top]} "
          f"delta={_fmt(summary.delta_mean[top])} sd={_fmt(sds[top])}")


def cmd_tree(cfg: RunConfig, out: _Outputs) -> None:
    table = _load_table(cfg, add_intercept=False)
    tcfg = cfg.tree_config()
    use_tot = cfg.tot if cfg.tot is not None else True
    if use_tot:
        response = tot_transform(table.y, table.d, table.q).y_star
    else:
        response = table.y
    tree = fit_tree(table.X, response, posterior_mean_weights(table.n), tcfg)

    out.write_json(
        "tree.json",
        {
            "schema_version": SCHEMA_VERSION,
            "command": "tree",
            "input": os.path.basename(_require_input(cfg)),
            "tot": use_tot,
            "q": table.q,
            "feature_names": list(table.feature_names),
            "tree": tree_to_dict(tree),
        },
    )
    n_leaves = len(tree.leaves())
    print(f"tree: {len(tree.nodes)} nodes, {n_leaves} leaves, depth {tree.depth}")
    root = tree.root
    if not root.is_leaf:
        print(f"root split: {table.feature_names[root.feature]} <= {_fmt(root.threshold)}")
    for leaf in tree.leaves():
        print(f"leaf {leaf.id}: n={leaf.count} mean={_fmt(leaf.mean)}")


def _split_prob_rows(table_names, sp):
    for i, j in enumerate(sp.features):
        yield [table_names[j], int(j)] + [float(v) for v in sp.probs[i]]


def _effects_from_config(section: dict) -> tuple[EffectSelector, ...]:
    effects = []
    for item in section.get("effects", ()):
        if not isinstance(item, dict) or "feature" not in item:
            raise ConfigError("each effect needs a 'feature' key")
        has_values = "values" in item
        has_interval = "interval" in item
        if has_values == has_interval:
            raise ConfigError("each effect needs exactly one of values/interval")
        try:
            effects.append(
                EffectSelector(
                    feature=item["feature"],
                    values=tuple(float(v) for v in item["values"]) if has_values else None,
                    interval=tuple(float(v) for v in item["interval"]) if has_interval else None,
                )
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad effect selector: {exc}") from exc
    return tuple(effects)


def cmd_forest(cfg: RunConfig, out: _Outputs) -> None:
    table = _load_table(cfg, add_intercept=False)
    tcfg = cfg.tree_config()
    section = cfg.section("forest")
    known = {"trees", "weights", "query_rows", "effects"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown forest keys: {sorted(unknown)}")
    B = int(section.get("trees", cfg.boot))
    if B < 1:
        raise ConfigError("forest needs at least one tree")
    kind_name = str(section.get("weights", "exponential"))
    try:
        kind = WeightScheme(kind_name)
    except ValueError as exc:
        raise ConfigError(f"unknown weight scheme {kind_name!r}") from exc
    use_tot = cfg.tot if cfg.tot is not None else False
    header_depths = [f"depth_le_{d}" for d in range(1, tcfg.max_depth + 1)]

    if use_tot:
        forest = fit_tot_forest(table, B, tcfg, cfg.seed, weights_kind=kind)
        sp = split_probabilities(forest)
        out.write_json(
            "forest.json",
            {
                "schema_version": SCHEMA_VERSION,
                "command": "forest",
                "input": os.path.basename(_require_input(cfg)),
                "tot": True,
                "trees": B,
                "weights": kind.value,
                "seed": cfg.seed.to_dict(),
                "feature_names": list(table.feature_names),
                "forest": forest_to_dict(forest),
            },
        )
        out.write_csv(
            "split_probabilities.csv",
            ["feature", "column", *header_depths],
            _split_prob_rows(table.feature_names, sp),
        )
        print(f"tot forest: {B} trees, root split fraction {_fmt(sp.root_split_fraction)}")
        if sp.features:
            top = int(np.argmax(sp.probs[:, 0]))
            print(f"most frequent root split: {table.feature_names[sp.features[top]]} "
                  f"(p={_fmt(sp.probs[top, 0])})")
        return

    f_t, f_c = fit_group_forests(table, B, tcfg, cfg.seed, weights_kind=kind)
    effects = _effects_from_config(section)
    query_rows = section.get("query_rows")
    query = None
    if query_rows is not None:
        rows = [int(r) for r in query_rows]
        bad = [r for r in rows if not 0 <= r < table.n]
        if bad:
            raise ConfigError(f"query rows out of range: {bad}")
        query = table.X[rows]
    summary = hte_summary(table, f_t, f_c, effects=effects, query=query)

    body = {
        "schema_version": SCHEMA_VERSION,
        "command": "forest",
        "input": os.path.basename(_require_input(cfg)),
        "tot": False,
        "trees": B,
        "weights": kind.value,
        "seed": cfg.seed.to_dict(),
        "feature_names": list(table.feature_names),
        "forest_ate": _draw_summary(summary.ate.draws),
        "effects": [
            {"label": e.label, "feature": e.feature, "n_rows": e.n_rows, **_draw_summary(e.draws)}
            for e in summary.effects
        ],
        "query": None,
    }
    if summary.query_draws is not None:
        body["query"] = [
            {"row": int(r), **_draw_summary(summary.query_draws[:, i])}
            for i, r in enumerate(query_rows)
        ]
    out.write_json("forest_report.json", body)

    for arm, forest in (("treated", f_t), ("control", f_c)):
        sp = split_probabilities(forest)
        out.write_csv(
            f"split_probabilities_{arm}.csv",
            ["feature", "column", *header_depths],
            _split_prob_rows(table.feature_names, sp),
        )
    out.write_csv(
        "forest_ate_draws.csv",
        ["replicate", "forest_ate"],
        ([b, float(v)] for b, v in enumerate(summary.ate.draws)),
    )
    if summary.effects:
        out.write_csv(
            "effect_summary.csv",
            ["label", "n_rows", "mean", "sd", "p10", "p90"],
            (
                [e.label, e.n_rows] + [float(_draw_summary(e.draws)[k]) for k in ("mean", "sd", "p10", "p90")]
                for e in summary.effects
            ),
        )
        out.write_csv(
            "effect_draws.csv",
            ["replicate"] + [e.label for e in summary.effects],
            ([b] + [float(e.draws[b]) for e in summary.effects] for b in range(B)),
        )
    if summary.query_draws is not None:
        out.write_csv(
            "query_draws.csv",
            ["replicate"] + [f"row_{r}" for r in query_rows],
            ([b] + [float(v) for v in summary.query_draws[b]] for b in range(B)),
        )

    ate = _draw_summary(summary.ate.draws)
    print(f"forests: {B} trees per arm")
    print(f"forest ate: mean={_fmt(ate['mean'])} sd={_fmt(ate['sd'])} "
          f"[p10={_fmt(ate['p10'])}, p90={_fmt(ate['p90'])}]")
    for e in summary.effects:
        s = _draw_summary(e.draws)
        print(f"effect {e.label}: mean={_fmt(s['mean'])} sd={_fmt(s['sd'])} "
              f"[p10={_fmt(s['p10'])}, p90={_fmt(s['p90'])}] n={e.n_rows}")


# ---------------------------------------------------------------------------
# Entry point

_COMMANDS = {
    "synth": cmd_synth,
    "expand": cmd_expand,
    "ate": cmd_ate,
    "lin-hte": cmd_lin_hte,
    "tree": cmd_tree,
    "forest": cmd_forest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="npbhte",
        description="Distribution-free Bayesian analysis of A/B experiments.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="input CSV path")
    common.add_argument("--config", help="YAML config path")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--boot", type=int, help="posterior replicates: bootstrap draws or trees")
    common.add_argument("--max-depth", type=int, dest="max_depth", help="tree split levels")
    common.add_argument("--min-leaf", type=int, dest="min_leaf", help="minimum rows per leaf")
    common.add_argument("--mtry", type=int, help="features considered per node")
    common.add_argument("--tot", action=argparse.BooleanOptionalAction, default=None,
                        help="fit on the effect-transformed response")
    common.add_argument("--q", type=float, help="treatment assignment probability")
    common.add_argument("--out", help="output directory (default npbhte_out)")

    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "draw a synthetic experiment with known truth",
        "expand": "build and apply the indicator expansion",
        "ate": "unadjusted and adjusted effect posteriors",
        "lin-hte": "arm-wise projection contrast posterior",
        "tree": "single effect tree at the posterior-mean weighting",
        "forest": "posterior forests: split probabilities, effects, ATE",
    }
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = None
    try:
        cfg = RunConfig.from_args(args)
        out = _Outputs(cfg.out)
        _COMMANDS[cfg.command](cfg, out)
        return 0
    except ConfigError as exc:
        if out:
            out.discard_all()
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        if out:
            out.discard_all()
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except RankDeficiencyError as exc:
        if out:
            out.discard_all()
        print(f"rank error: {exc}", file=sys.stderr)
        return 4
    except ReplicateError as exc:
        if out:
            out.discard_all()
        print(f"replicate error: {exc}", file=sys.stderr)
        return 6
    except (ValueError, NpbhteError) as exc:
        if out:
            out.discard_all()
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
