"""Two-step test for interactions that nonlinear main effects can absorb.

Step 1 fits smooth main effects only.  Step 2 regresses the step-1
residuals on the centered interaction products.  An interaction that is
significant under parametric mains but not in step 2 is labelled
*ambiguous*: the data cannot tell it apart from nonlinear main effects of
dependent covariates.  The labels are a heuristic decision rule on two
t-values, not a significance test of the ambiguity itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .am import AmFit, AmSpec, fit_am
from .data import Dataset, center
from .ols import (DesignSpec, OlsFit, Power, Product, T_THRESHOLD, Term, build_design,
                  fit_ols, term_covariates)

AMBIGUOUS = "Ambiguous"
ROBUST = "Robust"
ABSENT = "AbsentInBoth"


class InteractionNotCovered(ValueError):
    pass


def classify(t_parametric: float, t_step2: float, threshold: float = T_THRESHOLD) -> str:
    if abs(t_step2) > threshold:
        return ROBUST
    if abs(t_parametric) > threshold:
        return AMBIGUOUS
    return ABSENT


@dataclass(frozen=True)
class TermEstimate:
    name: str
    estimate: float
    se: float
    t: float

    @classmethod
    def from_fit(cls, fit, name: str) -> "TermEstimate":
        return cls(name, fit.coefficients[name], fit.standard_errors[name], fit.t_values[name])

    def to_dict(self) -> dict:
        return {"name": self.name, "estimate": self.estimate, "se": self.se, "t": self.t}


def _centered(ds: Dataset, interactions: Sequence[Term]) -> Dataset:
    covs = sorted({c for t in interactions for c in term_covariates(t)
                   if not ds.is_factor(c)})
    return center(ds, covs) if covs else ds


def _check_covered(spec: AmSpec, interactions: Sequence[Term]) -> None:
    covered = spec.covariates()
    for term in interactions:
        missing = [c for c in term_covariates(term) if c not in covered]
        if missing:
            raise InteractionNotCovered(
                f"interaction {term.name!r} uses {missing} which step 1 does not model")


def two_step(spec: AmSpec, interactions: Sequence[Term], ds: Dataset) -> tuple[AmFit, OlsFit]:
    """Run both steps on already-centered data; return (step1, step2)."""
    step1 = fit_am(spec, ds)
    X2 = build_design(DesignSpec(tuple(interactions), intercept=True), ds)
    # products of centered covariates still have mean cov(x, z); centering them
    # leaves slopes unchanged and puts the intercept at mean(residuals) = 0
    X = X2.X.copy()
    X[:, 1:] -= X[:, 1:].mean(axis=0)
    step2 = fit_ols(X, step1.residuals, X2.names)
    return step1, step2


def _reference(spec: AmSpec, interactions, ds, extra_mains):
    mains: list[Term] = []
    for term in interactions:
        for c in term_covariates(term):
            if not ds.is_factor(c) and all(getattr(m, "name", None) != c for m in mains):
                mains.append(Power(c, 1))
    design = DesignSpec(tuple(mains))
    design = design.extend(list(extra_mains))
    if spec.parametric is not None:
        design = design.extend(list(spec.parametric.terms))
    design = design.extend(list(interactions))
    if spec.random_intercepts:
        ref_spec = AmSpec(spec.response, (), DesignSpec(design.terms, intercept=False),
                          spec.random_intercepts, spec.include_intercept)
        return fit_am(ref_spec, ds), design
    return fit_ols(build_design(design, ds), ds.numeric(spec.response)), design


@dataclass(frozen=True)
class AmbiguityReport:
    step1: dict
    step2_terms: list[TermEstimate]
    step2_r2: float
    step2_intercept: float
    step2_dof: int
    parametric_terms: list[TermEstimate]
    parametric_r2: float
    parametric_model: str
    classification: dict[str, str]
    threshold: float = T_THRESHOLD
    step1_fit: AmFit | None = field(default=None, repr=False, compare=False)
    step2_fit: OlsFit | None = field(default=None, repr=False, compare=False)
    parametric_fit: object = field(default=None, repr=False, compare=False)

    def step2(self, name: str) -> TermEstimate:
        return next(t for t in self.step2_terms if t.name == name)

    def parametric(self, name: str) -> TermEstimate:
        return next(t for t in self.parametric_terms if t.name == name)

    def reclassify(self) -> dict[str, str]:
        return {name: classify(self.parametric(name).t, self.step2(name).t, self.threshold)
                for name in self.classification}

    def to_dict(self) -> dict:
        return {
            "step1": self.step1,
            "step2": {
                "terms": [t.to_dict() for t in self.step2_terms],
                "r2": self.step2_r2,
                "intercept": self.step2_intercept,
                "dof": self.step2_dof,
            },
            "parametric": {
                "model": self.parametric_model,
                "terms": [t.to_dict() for t in self.parametric_terms],
                "r2": self.parametric_r2,
            },
            "classification": dict(self.classification),
            "thresholds": {"t": self.threshold},
            "heuristic": True,
        }

    def summary(self) -> str:
        lines = [f"step 1 R^2 = {self.step1['r2']:.4g}; step 2 R^2 = {self.step2_r2:.4g}; "
                 f"parametric ({self.parametric_model}) R^2 = {self.parametric_r2:.4g}"]
        for name, label in self.classification.items():
            lines.append(f"{name}: {label} (parametric t = {self.parametric(name).t:.3f}, "
                         f"residual t = {self.step2(name).t:.3f}, |t| > {self.threshold:g})")
        return "\n".join(lines)


def two_step_test(spec: AmSpec, interactions: Sequence[Term], ds: Dataset,
                  parametric_mains: Sequence[Term] = (),
                  threshold: float = T_THRESHOLD) -> AmbiguityReport:
    """Compare each interaction under parametric mains and after smooth mains.

    ``parametric_mains`` adds terms (e.g. ``x^2``) to the parametric
    reference model, which otherwise has linear mains for every covariate
    in an interaction.  Step-2 standard errors use the naive residual
    degrees of freedom ``n - p2``; step-1 smoothing is not accounted for.
    """
    interactions = list(interactions)
    if not interactions:
        raise ValueError("no interaction terms given")
    for term in interactions:
        if not isinstance(term, Product):
            raise ValueError(f"{term!r} is not a product term")
    _check_covered(spec, interactions)
    cds = _centered(ds, interactions)
    step1, step2 = two_step(spec, interactions, cds)
    ref, _ = _reference(spec, interactions, cds, parametric_mains)

    names = [t.name for t in interactions]
    step2_terms = [TermEstimate.from_fit(step2, nm) for nm in names]
    ref_terms = [TermEstimate.from_fit(ref, nm) for nm in ref.coefficients if nm != "(Intercept)"]
    ref_t = {t.name: t.t for t in ref_terms}
    labels = {nm: classify(ref_t[nm], step2.t_values[nm], threshold) for nm in names}
    return AmbiguityReport(
        step1=step1.summary(),
        step2_terms=step2_terms,
        step2_r2=step2.r_squared,
        step2_intercept=step2.coefficients["(Intercept)"],
        step2_dof=step2.dof_residual,
        parametric_terms=ref_terms,
        parametric_r2=ref.r_squared,
        parametric_model="LMM" if isinstance(ref, AmFit) else "LM",
        classification=labels,
        threshold=threshold,
        step1_fit=step1,
        step2_fit=step2,
        parametric_fit=ref,
    )


# ------------------------------------------------------------------ #
# Side-by-side table
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    parametric: TermEstimate
    residual: TermEstimate
    label: str | None


@dataclass(frozen=True)
class ComparisonTable:
    rows: list[ComparisonRow]
    parametric_r2: float
    step1_r2: float
    residual_r2: float
    parametric_model: str
    threshold: float = T_THRESHOLD

    def row(self, name: str) -> ComparisonRow:
        return next(r for r in self.rows if r.name == name)

    def to_dict(self) -> dict:
        return {
            "rows": [{"term": r.name, "parametric": r.parametric.to_dict(),
                      "residual": r.residual.to_dict(), "classification": r.label}
                     for r in self.rows],
            "r2": {"parametric": self.parametric_r2, "step1": self.step1_r2,
                   "residual": self.residual_r2},
            "parametric_model": self.parametric_model,
            "thresholds": {"t": self.threshold},
        }

    def to_markdown(self) -> str:
        def cell(e: TermEstimate) -> str:
            t = f"**{e.t:.3g}**" if abs(e.t) > self.threshold else f"{e.t:.3g}"
            return f"{e.estimate:.3g} | {e.se:.3g} | {t}"

        out = [f"| term | estimate | SE | t ({self.parametric_model}) | estimate | SE | t (residuals) | label |",
               "|---|---|---|---|---|---|---|---|"]
        for r in self.rows:
            out.append(f"| {r.name} | {cell(r.parametric)} | {cell(r.residual)} | {r.label or ''} |")
        out.append("")
        out.append(f"R^2: parametric {self.parametric_r2:.3g}, smooth mains {self.step1_r2:.3g}, "
                   f"residual model {self.residual_r2:.3g}.  |t| > {self.threshold:g} in bold.")
        return "\n".join(out)


def compare_models(ds: Dataset, parametric: DesignSpec, spec: AmSpec,
                   interactions: Sequence[Term] | None = None,
                   threshold: float = T_THRESHOLD) -> ComparisonTable:
    """Fit ``parametric`` to the data and to the residuals of the smooth-mains model.

    Both fits use the same design.  With random intercepts in ``spec`` the
    parametric model is the corresponding LMM; the residual model is plain
    least squares.  Interaction terms (all products by default) are labelled.
    """
    if interactions is None:
        interactions = [t for t in parametric.terms if isinstance(t, Product)]
    interactions = list(interactions)
    _check_covered(spec, interactions)
    products = [t for t in parametric.terms if isinstance(t, Product)]
    cds = _centered(ds, products or interactions)

    if spec.random_intercepts:
        pfit = fit_am(AmSpec(spec.response, (), DesignSpec(parametric.terms, intercept=False),
                             spec.random_intercepts), cds)
        model = "LMM"
    else:
        pfit = fit_ols(build_design(parametric, cds), cds.numeric(spec.response))
        model = "LM"
    step1 = fit_am(spec, cds)
    rdesign = DesignSpec(parametric.terms, intercept=True)
    rfit = fit_ols(build_design(rdesign, cds), step1.residuals)

    labelled = {t.name for t in interactions}
    rows = []
    for name in rfit.names:
        if name == "(Intercept)":
            continue
        p, r = TermEstimate.from_fit(pfit, name), TermEstimate.from_fit(rfit, name)
        rows.append(ComparisonRow(name, p, r,
                                  classify(p.t, r.t, threshold) if name in labelled else None))
    return ComparisonTable(rows, pfit.r_squared, step1.r_squared, rfit.r_squared, model, threshold)


def product(*covariates: str) -> Product:
    return Product(tuple(Power(c, 1) for c in covariates))


__all__ = [
    "AMBIGUOUS", "ROBUST", "ABSENT", "AmbiguityReport", "ComparisonTable", "InteractionNotCovered",
    "classify", "compare_models", "product", "two_step", "two_step_test",
]
