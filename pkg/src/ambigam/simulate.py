"""Seeded data generators and the Monte Carlo study runner.

Random numbers come from numpy's Philox generator (a counter-based PRNG)
keyed by ``SeedSequence([seed, stream])``.  Each study iteration gets its
own 64-bit seed derived from the master seed and the iteration index, so an
iteration can be regenerated alone and results do not depend on execution
order or worker count.  Normal deviates are produced by the inverse normal
CDF applied to open-interval uniforms.  Bit-stability is promised only
within one release of this package.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .am import AmSpec
from .ambiguity import two_step
from .data import Dataset, center, dichotomize
from .ols import DesignSpec, Power, Product, anova_two_way, build_design, fit_ols

PRNG_NAME = "Philox4x64-10 keyed by SeedSequence([seed, stream])"
_INV_2_53 = 2.0 ** -53


class EmptyStudy(ValueError):
    pass


class TooFewIterations(UserWarning):
    pass


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def open_uniform(rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniform draws on the open interval (0, 1) from 53-bit integers."""
    k = rng.integers(0, 2 ** 53, size=size, dtype=np.uint64)
    return (k.astype(np.float64) + 0.5) * _INV_2_53


def normal(rng: np.random.Generator, size: int) -> np.ndarray:
    return ndtri(open_uniform(rng, size))


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


# ------------------------------------------------------------------ #
# Scenarios
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class Scenario:
    """One generating process.

    ``law="linear"`` gives ``z = w_x x + w_u u``; ``law="quadratic"`` gives
    ``z = 4 x^2 + u``.  ``process`` is ``"x2"`` (y = x^2 + e), ``"xz"``
    (y = x z + e) or ``"x3"`` (y = x^3 + e).
    """

    id: str
    n: int
    law: str
    process: str
    w_x: float = 1.0 / 3.0
    w_u: float = 2.0 / 3.0
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.law not in ("linear", "quadratic"):
            raise ValueError(f"unknown covariate law {self.law!r}")
        if self.process not in ("x2", "xz", "x3"):
            raise ValueError(f"unknown process {self.process!r}")

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))


SCENARIOS = {
    "Intro": Scenario("Intro", 5000, "linear", "x2", 0.5, 0.5),
    "S1": Scenario("S1", 1000, "linear", "x2"),
    "S2": Scenario("S2", 1000, "linear", "x2"),
    "S3": Scenario("S3", 1000, "linear", "x2"),
    "S4": Scenario("S4", 1000, "linear", "xz"),
    "S5": Scenario("S5", 1000, "linear", "x3"),
    "S6": Scenario("S6", 1000, "quadratic", "x3"),
    "S7": Scenario("S7", 1000, "quadratic", "x3"),
}


def scenario(sid: str, seed: int = 0, n: int | None = None) -> Scenario:
    sc = SCENARIOS[sid].with_seed(seed)
    return replace(sc, n=n) if n is not None else sc


def generate(sc: Scenario) -> Dataset:
    """Columns ``y``, ``x``, ``z``; the hidden ``u`` is not returned."""
    if sc.n < 10:
        raise ValueError("n must be at least 10")
    rng = rng_for(sc.seed)
    x = 2.0 * open_uniform(rng, sc.n) - 1.0
    u = 2.0 * open_uniform(rng, sc.n) - 1.0
    eps = sc.noise_sd * normal(rng, sc.n)
    if sc.law == "linear":
        z = sc.w_x * x + sc.w_u * u
    else:
        z = 4.0 * x ** 2 + u
    if sc.process == "x2":
        mean = x ** 2
    elif sc.process == "xz":
        mean = x * z
    else:
        mean = x ** 3
    return Dataset({"y": mean + eps, "x": x, "z": z}, response_name="y",
                   meta={"scenario": sc.id, "seed": sc.seed})


# ------------------------------------------------------------------ #
# Analysis pipelines
# ------------------------------------------------------------------ #

XZ = Product((Power("x"), Power("z")))


@dataclass(frozen=True)
class ParametricPipeline:
    """Least squares with an intercept on raw (uncentered) covariates."""

    terms: tuple
    interaction: Product = XZ
    label: str = ""

    @property
    def name(self) -> str:
        return self.label or "LM " + " + ".join(t.name for t in self.terms)

    def run(self, ds: Dataset) -> dict:
        fit = fit_ols(build_design(DesignSpec(self.terms), ds), ds["y"])
        nm = self.interaction.name
        return {"t": fit.t_values[nm], "coefficient": fit.coefficients[nm],
                "r2": fit.r_squared, "r2_step2": None}


@dataclass(frozen=True)
class TwoStepPipeline:
    """Smooth mains of x and z, then the centered x:z product on residuals."""

    smooths: tuple = (("x", 10), ("z", 10))
    interaction: Product = XZ
    label: str = ""

    @property
    def name(self) -> str:
        return self.label or "two-step " + " + ".join(f"s({c})" for c, _ in self.smooths)

    def run(self, ds: Dataset) -> dict:
        cds = center(ds, list(self.interaction.covariates))
        step1, step2 = two_step(AmSpec("y", self.smooths), [self.interaction], cds)
        nm = self.interaction.name
        return {"t": step2.t_values[nm], "coefficient": step2.coefficients[nm],
                "r2": step1.r_squared, "r2_step2": step2.r_squared}


LM_LINEAR = ParametricPipeline((Power("x"), Power("z"), XZ))
LM_QUADRATIC_X = ParametricPipeline((Power("x"), Power("x", 2), XZ))
TWO_STEP = TwoStepPipeline()


# ------------------------------------------------------------------ #
# Studies
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class StudySummary:
    scenario_id: str
    pipeline: str
    iterations: int
    seed: int
    mean_t: float
    mean_r2: float
    mean_r2_step2: float | None
    mean_coefficient: float
    rejection_rate: float
    sd_t: float
    records: list[dict] = field(repr=False)
    failures: int = 0

    def to_dict(self, with_records: bool = False) -> dict:
        d = {
            "scenario": self.scenario_id,
            "pipeline": self.pipeline,
            "iterations": self.iterations,
            "seed": self.seed,
            "mean_t": self.mean_t,
            "sd_t": self.sd_t,
            "mean_r2": self.mean_r2,
            "mean_r2_step2": self.mean_r2_step2,
            "mean_coefficient": self.mean_coefficient,
            "rejection_rate": self.rejection_rate,
            "failures": self.failures,
        }
        if with_records:
            d["records"] = self.records
        return d

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "iteration", "seed", "t", "coefficient", "r2", "r2_step2"])
            for r in self.records:
                w.writerow([self.scenario_id, r["iteration"], r["seed"], repr(r["t"]),
                            repr(r["coefficient"]), repr(r["r2"]),
                            "" if r["r2_step2"] is None else repr(r["r2_step2"])])


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("AMBIG_THREADS")
    return max(1, int(env)) if env else 1


def _one(sc: Scenario, pipeline, i: int, seed: int):
    it_seed = derive_seed(seed, i)
    try:
        out = pipeline.run(generate(sc.with_seed(it_seed)))
    except (ValueError, np.linalg.LinAlgError) as exc:
        return {"iteration": i, "seed": it_seed, "error": str(exc)}
    return {"iteration": i, "seed": it_seed, **out}


def summarize(scenario_id: str, pipeline_name: str, seed: int, records: list[dict],
              failures: int = 0) -> StudySummary:
    t = np.array([r["t"] for r in records])
    r2_2 = [r["r2_step2"] for r in records]
    return StudySummary(
        scenario_id=scenario_id,
        pipeline=pipeline_name,
        iterations=len(records),
        seed=seed,
        mean_t=float(np.mean(t)),
        mean_r2=float(np.mean([r["r2"] for r in records])),
        mean_r2_step2=None if r2_2[0] is None else float(np.mean(r2_2)),
        mean_coefficient=float(np.mean([r["coefficient"] for r in records])),
        rejection_rate=float(np.mean(np.abs(t) > 2.0)),
        sd_t=float(np.std(t, ddof=1)) if len(t) > 1 else float("nan"),
        records=records,
        failures=failures,
    )


def run_study(sc: Scenario, pipeline, iterations: int, seed: int | None = None,
              workers: int | None = None) -> StudySummary:
    """Generate-and-fit ``iterations`` times and aggregate the interaction t.

    Iteration ``i`` uses data seed ``derive_seed(seed, i)`` (``seed``
    defaults to the scenario's).  Failed iterations are excluded with a
    warning.  ``workers`` (default: ``AMBIG_THREADS`` or 1) only changes
    speed, never results.
    """
    if iterations < 1:
        raise EmptyStudy("a study needs at least one iteration")
    seed = sc.seed if seed is None else int(seed)
    nw = worker_count(workers)
    if nw == 1:
        raw = [_one(sc, pipeline, i, seed) for i in range(iterations)]
    else:
        with ThreadPoolExecutor(nw) as pool:
            raw = list(pool.map(lambda i: _one(sc, pipeline, i, seed), range(iterations)))
    good = [r for r in raw if "error" not in r]
    failures = len(raw) - len(good)
    if failures:
        warnings.warn(f"{failures} of {iterations} iterations failed and were excluded",
                      RuntimeWarning, stacklevel=2)
    if not good:
        raise EmptyStudy("every iteration failed")
    return summarize(sc.id, pipeline.name, seed, good, failures)


def estimate_rates(summary: StudySummary, threshold: float = 2.0) -> tuple[float, float]:
    """Rejection rate at ``|t| > threshold`` and its binomial standard error."""
    n = summary.iterations
    if n < 30:
        warnings.warn(f"only {n} iterations; the standard error is unreliable",
                      TooFewIterations, stacklevel=2)
    p = float(np.mean([abs(r["t"]) > threshold for r in summary.records]))
    return p, math.sqrt(p * (1.0 - p) / n)


# ------------------------------------------------------------------ #
# Published simulation table
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class Table3Row:
    row: int
    scenario_id: str
    pipeline: object
    t: float
    r2: float
    r2_step2: float | None = None
    coefficient: float | None = None


TABLE3 = [
    Table3Row(1, "S1", LM_LINEAR, 3.84, 0.017),
    Table3Row(2, "S2", LM_QUADRATIC_X, 0.10, 0.084),
    Table3Row(3, "S3", TWO_STEP, 0.12, 0.086, 0.00092),
    Table3Row(4, "S4", TWO_STEP, 3.46, 0.042, 0.012, 0.45),
    Table3Row(5, "S5", LM_QUADRATIC_X, -0.069, 0.11),
    Table3Row(6, "S6", LM_QUADRATIC_X, 4.14, 0.12),
    Table3Row(7, "S7", TWO_STEP, 0.34, 0.13, 0.00010),
]

T_BAND = 0.5
R2_REL = 0.30
R2_FLOOR = 0.005
COEF_BAND = 0.10


def r2_tolerance(target: float) -> float:
    return max(R2_REL * abs(target), R2_FLOOR)


def evaluate_row(spec: Table3Row, summary: StudySummary) -> dict:
    n = summary.iterations
    t = np.array([r["t"] for r in summary.records])
    se_t = float(np.std(t, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    checks = {
        "t": abs(summary.mean_t - spec.t) <= T_BAND,
        "r2": abs(summary.mean_r2 - spec.r2) <= r2_tolerance(spec.r2),
    }
    if spec.r2_step2 is not None:
        checks["r2_step2"] = abs(summary.mean_r2_step2 - spec.r2_step2) <= r2_tolerance(spec.r2_step2)
    if spec.coefficient is not None:
        checks["coefficient"] = abs(summary.mean_coefficient - spec.coefficient) <= COEF_BAND
    return {
        "row": spec.row,
        "scenario": spec.scenario_id,
        "model": summary.pipeline,
        "iterations": n,
        "mean_t": summary.mean_t,
        "se_t": se_t,
        "target_t": spec.t,
        "mean_r2": summary.mean_r2,
        "target_r2": spec.r2,
        "mean_r2_step2": summary.mean_r2_step2,
        "target_r2_step2": spec.r2_step2,
        "mean_coefficient": summary.mean_coefficient,
        "target_coefficient": spec.coefficient,
        "rejection_rate": summary.rejection_rate,
        "se_reliable": n >= 30,
        "checks": checks,
        "pass": all(checks.values()),
    }


def intro_example(seed: int, n: int = 5000) -> dict:
    """LM and two-way ANOVA on the dichotomized introductory example."""
    ds = generate(scenario("Intro", seed, n))
    lm = fit_ols(build_design(DesignSpec((Power("x"), Power("z"), XZ)), ds), ds["y"])
    fds = dichotomize(dichotomize(ds, "x"), "z")
    aov = anova_two_way(fds, "y", "x_f", "z_f")
    return {
        "seed": seed,
        "cor_xz": float(np.corrcoef(ds["x"], ds["z"])[0, 1]),
        "lm": lm.to_dict(),
        "anova": aov.to_dict(),
        "t_interaction": lm.t_values["x:z"],
        "t_x": lm.t_values["x"],
        "t_z": lm.t_values["z"],
        "F_interaction": aov["x_f:z_f"].f_value,
        "F_x": aov["x_f"].f_value,
        "F_z": aov["z_f"].f_value,
    }


def intro_passes(res: dict) -> dict:
    return {
        "t_interaction": abs(res["t_interaction"]) > 8,
        "F_interaction": res["F_interaction"] > 40,
        "t_mains": abs(res["t_x"]) < 2 and abs(res["t_z"]) < 2,
        "F_mains": res["F_x"] < 4 and res["F_z"] < 4,
    }


def run_table3(iterations: int = 100, seed: int = 42, workers: int | None = None) -> dict:
    rows = []
    for spec in TABLE3:
        sc = scenario(spec.scenario_id, derive_seed(seed, spec.row))
        summary = run_study(sc, spec.pipeline, iterations, workers=workers)
        rows.append(evaluate_row(spec, summary))
    intro = intro_example(derive_seed(seed, 0))
    intro["checks"] = intro_passes(intro)
    intro["pass"] = all(intro["checks"].values())
    return {"iterations": iterations, "seed": seed, "prng": PRNG_NAME,
            "rows": rows, "intro": intro}


def table3_markdown(result: dict) -> str:
    out = [f"Simulation table: {result['iterations']} iterations, seed {result['seed']}", "",
           "| row | scenario | model | mean R^2 | target R^2 | mean t | SE(t) | target t | pass |",
           "|---|---|---|---|---|---|---|---|---|"]
    for r in result["rows"]:
        r2 = f"{r['mean_r2']:.4g}"
        target_r2 = f"{r['target_r2']:.4g}"
        if r["mean_r2_step2"] is not None:
            r2 += f" / {r['mean_r2_step2']:.3g}"
            target_r2 += f" / {r['target_r2_step2']:.3g}"
        se = f"{r['se_t']:.3g}" if r["se_reliable"] else f"{r['se_t']:.3g} (unreliable)"
        out.append(f"| {r['row']} | {r['scenario']} | {r['model']} | {r2} | {target_r2} | "
                   f"{r['mean_t']:.3g} | {se} | {r['target_t']:.3g} | {'yes' if r['pass'] else 'NO'} |")
    i = result["intro"]
    out += ["", f"Introductory example (n=5000): LM t(x:z) = {i['t_interaction']:.2f}, "
            f"ANOVA F(X:Z) = {i['F_interaction']:.2f}, cor(x, z) = {i['cor_xz']:.3f}; "
            f"pass: {'yes' if i['pass'] else 'NO'}"]
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ #
# Synthetic stand-ins for the two observational corpora
# ------------------------------------------------------------------ #


def generate_expectations(seed: int, n: int = 7748, rho: float = 0.67,
                          noise_sd: float = 2.2) -> Dataset:
    """Survey-like data: children's expected years of schooling (EE) as an
    additive, convex-then-saturating function of correlated parental
    education (ME, FE, whole years 6..20)."""
    rng = rng_for(seed)
    a = normal(rng, n)
    b = rho * a + math.sqrt(1.0 - rho ** 2) * normal(rng, n)
    me = np.clip(np.round(12.0 + 2.6 * a), 6, 20)
    fe = np.clip(np.round(12.0 + 3.0 * b), 6, 20)

    def effect(v):
        # flat below twelve years, rising above, levelling off near twenty
        return 2.2 * np.log1p(np.exp(v - 12.0)) - 0.09 * np.maximum(v - 14.0, 0.0) ** 2

    ee = 13.0 + 0.21 * effect(me) + 0.18 * effect(fe) + noise_sd * normal(rng, n)
    return Dataset({"EE": ee, "ME": me, "FE": fe}, response_name="EE",
                   meta={"seed": seed, "synthetic": "expectations"})


def generate_reading(seed: int, n_fixations: int = 13523, n_subjects: int = 48,
                     n_sentences: int = 120, words_per_sentence: int = 10) -> Dataset:
    """Fixation-location-like data with crossed Word, Sentence and Subject
    factors.  Word length is root plus suffix length, so the two are
    linearly dependent; the landing position depends nonlinearly on word
    length and on the incoming saccade amplitude."""
    rng = rng_for(seed)
    n_words = n_sentences * words_per_sentence
    n_suffix = np.minimum((open_uniform(rng, n_words) * 2.7) ** 1.6, 5).astype(int)
    root = np.clip(np.round(4.7 + 1.7 * normal(rng, n_words)), 1, 11)
    suffix_len = np.where(n_suffix > 0,
                          np.clip(np.round(n_suffix * 2.0 + 0.8 * normal(rng, n_words)), 1, 15), 0)
    word_len = root + suffix_len
    word_effect = 0.25 * normal(rng, n_words)
    sentence_effect = 0.2 * normal(rng, n_sentences)
    subject_effect = 0.35 * normal(rng, n_subjects)

    word = np.floor(open_uniform(rng, n_fixations) * n_words).astype(int)
    subject = np.floor(open_uniform(rng, n_fixations) * n_subjects).astype(int)
    sentence = word // words_per_sentence
    amp = np.clip(1.0 + 0.35 * normal(rng, n_fixations), 0.2, 2.5)
    lw = word_len[word]
    ls = suffix_len[word]
    centre = 0.5 * lw
    landing = (0.9 + 0.45 * centre - 0.012 * (lw - 7.5) ** 2 - 1.1 * (amp - 1.0)
               - 0.35 * (amp - 1.0) * (lw - 7.5) / 3.0
               + word_effect[word] + sentence_effect[sentence] + subject_effect[subject]
               + 1.2 * normal(rng, n_fixations))
    return Dataset(
        {
            "x_l": landing,
            "a": amp,
            "l_w": lw.astype(float),
            "l_s": ls.astype(float),
            "Word": np.array([f"w{i}" for i in word], dtype=object),
            "Sentence": np.array([f"s{i}" for i in sentence], dtype=object),
            "Subject": np.array([f"p{i}" for i in subject], dtype=object),
        },
        response_name="x_l",
        meta={"seed": seed, "synthetic": "reading"},
    )


def cell_means(ds: Dataset, response: str, first: str, second: str) -> list[dict]:
    """Cell means of a two-factor layout, for interaction plots."""
    out = []
    y = ds.numeric(response)
    for a in ds.levels[first]:
        for b in ds.levels[second]:
            mask = (ds[first] == a) & (ds[second] == b)
            if mask.any():
                out.append({first: a, second: b, "mean": float(y[mask].mean()),
                            "n": int(mask.sum()),
                            "se": float(y[mask].std(ddof=1) / math.sqrt(mask.sum()))
                            if mask.sum() > 1 else float("nan")})
    return out


__all__ = [
    "EmptyStudy", "Scenario", "SCENARIOS", "StudySummary", "TABLE3", "TWO_STEP", "LM_LINEAR",
    "LM_QUADRATIC_X", "ParametricPipeline", "TwoStepPipeline", "estimate_rates", "generate",
    "generate_expectations", "generate_reading", "run_study", "run_table3", "scenario",
]
