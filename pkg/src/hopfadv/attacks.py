"""Adversarial attacks on the phase classifier.

Gradient attacks (FGSM, PGD, MIM) perturb all 3000 input scalars; the
differential-evolution attack (DEA) overwrites a handful of sites. Every
final example is projected back to pure states site by site, and an example
is only *accepted* if the classifier is fooled with confidence > 0.5 while
the lattice Hopf index is unchanged.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import experiment, invariant
from .errors import HopfError, NetFlux, ZeroVectorSite
from .hopf import BlochField, PhaseLabel
from .network import CnnModel, loss_and_grad_input, per_sample_loss, predict_batches

log = logging.getLogger(__name__)

CONFIDENCE_THRESHOLD = 0.5
TUNING_BUDGETS = (0.1, 0.2, 0.3, 0.4)
TUNING_ITERATIONS = (10, 20, 50)


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    iterations: int = 10
    gamma: float | None = None
    mu: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0 or self.iterations < 1 or self.mu < 0:
            raise ValueError(f"invalid attack budget {self}")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass(frozen=True)
class DeaConfig:
    population: int = 100
    pixels: int = 7
    mutation: float = 0.5
    crossover: float = 0.9
    iterations: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("DEA needs a population of at least 4")
        if not 0.0 < self.crossover <= 1.0:
            raise ValueError("crossover probability must lie in (0, 1]")
        if self.pixels < 1 or self.iterations < 0:
            raise ValueError("pixels must be >= 1 and iterations >= 0")


@dataclass
class AdversarialExample:
    field: BlochField
    parent_h: float | None
    parent_label: PhaseLabel
    method: str
    params: dict
    probabilities: np.ndarray
    seed: int | None = None
    mean_fidelity: float | None = None
    changed_sites: int | None = None
    hopf_parent: float | None = None
    hopf_adversarial: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def predicted(self) -> PhaseLabel:
        return PhaseLabel(int(np.argmax(self.probabilities)))

    @property
    def wrong_confidence(self) -> float:
        p = np.array(self.probabilities, dtype=float)
        p[int(self.parent_label)] = -np.inf
        return float(p.max())

    @property
    def fooled(self) -> bool:
        return self.predicted != self.parent_label and self.wrong_confidence > CONFIDENCE_THRESHOLD

    @property
    def invariant_preserved(self) -> bool | None:
        if self.hopf_parent is None or self.hopf_adversarial is None:
            return None
        if not np.isfinite(self.hopf_adversarial):
            return False
        return int(np.rint(self.hopf_parent)) == int(np.rint(self.hopf_adversarial))

    @property
    def accepted(self) -> bool:
        return self.fooled and bool(self.invariant_preserved)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "params": self.params,
            "seed": self.seed,
            "parent_h": self.parent_h,
            "parent_label": self.parent_label.chi,
            "probabilities": [float(p) for p in self.probabilities],
            "predicted_label": self.predicted.chi,
            "wrong_confidence": self.wrong_confidence,
            "fooled": self.fooled,
            "mean_fidelity": self.mean_fidelity,
            "changed_sites": self.changed_sites,
            "hopf_parent": self.hopf_parent,
            # an ill-defined invariant (NaN) is written as null; the reason is in extra
            "hopf_adversarial": (self.hopf_adversarial if self.hopf_adversarial is None
                                 or np.isfinite(self.hopf_adversarial) else None),
            "invariant_preserved": self.invariant_preserved,
            "accepted": self.accepted,
            "extra": self.extra,
            "field": {"n": self.field.n, "h": self.field.h, "bloch": self.field.data.reshape(-1)},
        }


def renormalize(field: BlochField | np.ndarray, tol: float = 1e-9) -> BlochField:
    """Project every site onto the Bloch sphere (pure states)."""
    data = field.data if isinstance(field, BlochField) else np.asarray(field, dtype=np.float64)
    norm = np.linalg.norm(data, axis=-1, keepdims=True)
    if np.any(norm <= tol):
        idx = tuple(int(v) for v in np.argwhere(norm[..., 0] <= tol)[0])
        raise ZeroVectorSite(f"site {idx} has (near) zero Bloch vector")
    return BlochField(data / norm, None)


def mean_pure_fidelity(a: BlochField, b: BlochField) -> float:
    """Average of ``(1 + s_a . s_b) / 2`` over sites."""
    return float(np.mean(0.5 * (1.0 + np.sum(a.data * b.data, axis=-1))))


def _sign(g: np.ndarray) -> np.ndarray:
    return np.sign(g)


def fgsm(model: CnnModel, field: BlochField, label, epsilon: float) -> BlochField:
    """``x + epsilon * sign(grad_x L)`` (no renormalization)."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    _, g, _ = loss_and_grad_input(model, field, label)
    return BlochField(field.data + epsilon * _sign(g), None)


def _pgd_raw(model, x0: np.ndarray, label, budget: AttackBudget) -> np.ndarray:
    gamma = budget.epsilon if budget.gamma is None else budget.gamma
    alpha = budget.epsilon / budget.iterations
    hi, lo = x0 + gamma, x0 - gamma
    x = x0.copy()
    for _ in range(budget.iterations):
        _, g, _ = loss_and_grad_input(model, x, label)
        x = x + alpha * _sign(g)
        x = np.where(x > hi, 2.0 * hi - x, x)
        x = np.where(x < lo, 2.0 * lo - x, x)
        # a reflection can overshoot the far face when the step exceeds 2*gamma
        x = np.clip(x, lo, hi)
    return x


def _mim_raw(model, x0: np.ndarray, label, budget: AttackBudget) -> np.ndarray:
    alpha = budget.epsilon / budget.iterations
    a = np.zeros_like(x0)
    x = x0.copy()
    for _ in range(budget.iterations):
        _, g, _ = loss_and_grad_input(model, x, label)
        l1 = np.abs(g).sum()
        a = budget.mu * a + (g / l1 if l1 > 0 else g)
        x = x + alpha * _sign(a)
    return x


def _finish(model, parent: BlochField, label, raw: np.ndarray, method: str, params: dict, seed=None,
            with_invariant: bool = True, **extra) -> AdversarialExample:
    adv = renormalize(raw)
    probs = predict_batches(model, adv.data[None])[0]
    ex = AdversarialExample(
        field=adv,
        parent_h=parent.h,
        parent_label=PhaseLabel(int(label)),
        method=method,
        params=params,
        probabilities=probs,
        seed=seed,
        mean_fidelity=mean_pure_fidelity(adv, parent),
        changed_sites=int(np.sum(np.any(np.abs(adv.data - parent.data) > 1e-12, axis=-1))),
        extra=extra,
    )
    if with_invariant:
        attach_invariant(ex, parent)
    return ex


def attach_invariant(ex: AdversarialExample, parent: BlochField) -> AdversarialExample:
    ex.hopf_parent = invariant.hopf_index(parent).chi
    try:
        ex.hopf_adversarial = invariant.hopf_index(ex.field).chi
    except HopfError as err:  # an ill-defined lattice invariant counts as "changed"
        ex.extra["invariant_error"] = f"{type(err).__name__}: {err}"
        ex.hopf_adversarial = float("nan")
        if isinstance(err, NetFlux):
            # diagnostic value with the mean flux removed; never used for acceptance
            ex.extra["hopf_flux_removed"] = invariant.hopf_index(ex.field, net_flux="drop").chi
    return ex


def pgd(model: CnnModel, field: BlochField, label, budget: AttackBudget, with_invariant: bool = True) -> AdversarialExample:
    raw = _pgd_raw(model, field.data, label, budget)
    return _finish(model, field, label, raw, "pgd", asdict(budget), with_invariant=with_invariant)


def pgd_unnormalized(model: CnnModel, field: BlochField, label, budget: AttackBudget) -> BlochField:
    """PGD iterate before the final per-site projection (inside the l-inf box)."""
    return BlochField(_pgd_raw(model, field.data, label, budget), None)


def mim(model: CnnModel, field: BlochField, label, budget: AttackBudget, with_invariant: bool = True) -> AdversarialExample:
    raw = _mim_raw(model, field.data, label, budget)
    return _finish(model, field, label, raw, "mim", asdict(budget), with_invariant=with_invariant)


def iterative_fgsm(model: CnnModel, field: BlochField, label, epsilon: float, iterations: int) -> np.ndarray:
    """Plain iterated sign steps of size ``epsilon/iterations`` (no projection, no momentum)."""
    x = field.data.copy()
    for _ in range(iterations):
        _, g, _ = loss_and_grad_input(model, x, label)
        x = x + epsilon / iterations * _sign(g)
    return x


# ---------------------------------------------------------------- DEA


def _decode(X: np.ndarray, n: int, pixels: int) -> tuple[np.ndarray, np.ndarray]:
    X = X.reshape(-1, pixels, 6)
    pos = np.clip(np.rint(X[..., :3]), 0, n - 1).astype(np.int64)
    vec = np.clip(X[..., 3:], -1.0, 1.0)
    return pos, vec


def _apply(x0: np.ndarray, pos: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Overwrite sites ``pos`` with the renormalized ``vec`` for every candidate."""
    k = len(pos)
    out = np.repeat(x0[None], k, axis=0)
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    # a zero replacement vector has no direction; keep the parent value there
    safe = norm[..., 0] > 1e-9
    unit = np.where(safe[..., None], vec / np.where(safe[..., None], norm, 1.0), 0.0)
    cand = np.arange(k)[:, None].repeat(pos.shape[1], axis=1)
    src = x0[pos[..., 0], pos[..., 1], pos[..., 2]]
    out[cand, pos[..., 0], pos[..., 1], pos[..., 2]] = np.where(safe[..., None], unit, src)
    return out


def _population_loss(model, x0, X, label, n, pixels):
    pos, vec = _decode(X, n, pixels)
    fields = _apply(x0, pos, vec)
    return per_sample_loss_chunked(model, fields, label)


def per_sample_loss_chunked(model, fields, label, chunk=128):
    return np.concatenate([per_sample_loss(model, fields[i : i + chunk], label) for i in range(0, len(fields), chunk)])


def dea(model: CnnModel, field: BlochField, label, config: DeaConfig = DeaConfig(), with_invariant: bool = True,
        stop: str | None = None) -> AdversarialExample:
    """Differential evolution over ``pixels`` (site, replacement vector) pairs.

    Candidates are real vectors of length ``6 * pixels``: three position
    coordinates (rounded and clipped to the grid) and three replacement
    components (clipped to [-1, 1]) per pair. Fitness is the cross-entropy of
    the true label on the per-site renormalized field; a child replaces its
    parent when its loss is higher. Generations are synchronous.

    ``stop`` ends the evolution early: ``"fooled"`` once the best member
    fools the classifier, ``"accepted"`` once any fooling member also keeps
    the lattice Hopf index (the returned example is then that member).
    """
    if stop not in (None, "fooled", "accepted"):
        raise ValueError(f"unknown stop rule {stop!r}")
    rng = np.random.default_rng(config.seed)
    n = field.n
    m = config.pixels
    if m > n**3:
        raise ValueError("more pixels than grid sites")
    x0 = field.data
    npop = config.population
    X = np.empty((npop, m, 6))
    X[..., :3] = rng.uniform(0, n - 1, size=(npop, m, 3))
    X[..., 3:] = rng.uniform(-1, 1, size=(npop, m, 3))
    X = X.reshape(npop, 6 * m)
    fit = _population_loss(model, x0, X, label, n, m)
    best_trace = [float(fit.max())]
    checked: dict = {}
    for it in range(config.iterations):
        children = np.empty_like(X)
        for i in range(npop):
            others = np.delete(np.arange(npop), i)
            j, k, l = rng.choice(others, size=3, replace=False)
            child = X[j] + config.mutation * (X[k] - X[l])
            keep = rng.uniform(size=X.shape[1]) > config.crossover
            child[keep] = X[i][keep]
            children[i] = child
        child_fit = _population_loss(model, x0, children, label, n, m)
        better = child_fit > fit
        X[better] = children[better]
        fit[better] = child_fit[better]
        best_trace.append(float(fit.max()))
        if stop is not None:
            pick = _early_stop(model, field, x0, X, fit, label, n, m, stop, checked)
            if pick is not None:
                log.info("DEA stopped (%s) after %d generations", stop, it + 1)
                return _dea_result(model, field, label, X[pick], n, m, config, with_invariant, best_trace)
    return _dea_result(model, field, label, X[int(np.argmax(fit))], n, m, config, with_invariant, best_trace)


def _dea_result(model, field, label, member, n, m, config, with_invariant, trace) -> AdversarialExample:
    pos, vec = _decode(member[None], n, m)
    raw = _apply(field.data, pos, vec)[0]
    return _finish(model, field, label, raw, "dea", asdict(config), seed=config.seed, with_invariant=with_invariant,
                   best_loss_trace=trace, positions=pos[0].tolist())


def _early_stop(model, field, x0, X, fit, label, n, m, stop, checked: dict) -> int | None:
    """Index of a population member satisfying the stop rule, if any."""
    if stop == "fooled":
        order = [int(np.argmax(fit))]
    else:
        order = [int(i) for i in np.argsort(-fit)]
    pos, vec = _decode(X[order], n, m)
    cand = _apply(x0, pos, vec)
    probs = predict_batches(model, cand)
    label = int(label)
    wrong = np.delete(probs, label, axis=1)
    fooled = (probs.argmax(axis=1) != label) & (wrong.max(axis=1) > CONFIDENCE_THRESHOLD)
    if stop == "fooled":
        return order[0] if fooled[0] else None
    parent_chi = checked.setdefault("parent", int(np.rint(invariant.hopf_index(field).chi)))
    for j in np.flatnonzero(fooled):
        key = cand[j].tobytes()
        if key not in checked:
            try:
                checked[key] = int(np.rint(invariant.hopf_index(BlochField(cand[j], None)).chi)) == parent_chi
            except HopfError:
                checked[key] = False
        if checked[key]:
            return order[j]
    return None


# ---------------------------------------------------------------- noise screening


def noise_trial_probabilities(model: CnnModel, field: BlochField, trials: int, repetitions: int, seed: int,
                              noise: bool = True, workers: int = 1) -> np.ndarray:
    """Classifier output on ``trials`` simulated tomography reconstructions of ``field``.

    Trial ``t`` draws its shot noise from the generator seeded ``[seed, t]``,
    so results do not depend on ``workers``.
    """

    def one(t):
        return experiment.tomography_round_trip(field, repetitions, seed=[seed, t], noise=noise).field.data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            recon = list(pool.map(one, range(trials)))
    else:
        recon = [one(t) for t in range(trials)]
    return predict_batches(model, np.stack(recon))


def robustness_score(model: CnnModel, ex: AdversarialExample, trials: int = 100,
                     repetitions: int = experiment.PAPER_REPETITIONS, seed: int = 0, noise: bool = True,
                     workers: int = 1) -> float:
    """Fraction of noisy round trips still misclassified with wrong-class confidence > 0.5."""
    probs = noise_trial_probabilities(model, ex.field, trials, repetitions, seed, noise, workers)
    label = int(ex.parent_label)
    wrong = np.delete(probs, label, axis=1)
    fooled = (probs.argmax(axis=1) != label) & (wrong.max(axis=1) > CONFIDENCE_THRESHOLD)
    return float(fooled.mean())


def screen_robustness(model: CnnModel, candidates, trials: int = 100,
                      repetitions: int = experiment.PAPER_REPETITIONS, seed: int = 0,
                      noise: bool = True, workers: int = 1) -> list[tuple[AdversarialExample, float]]:
    """Score each candidate by the fraction of noisy round trips that still fool; best first."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    scored = []
    for idx, ex in enumerate(candidates):
        score = robustness_score(model, ex, trials, repetitions, seed=seed * 1_000_003 + idx, noise=noise,
                                 workers=workers)
        ex.extra["robustness"] = score
        scored.append((ex, score))
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][1], i))
    return [scored[i] for i in order]


# ---------------------------------------------------------------- budget search


def budget_grid(method: str, budgets=TUNING_BUDGETS, iterations=TUNING_ITERATIONS, mu: float = 1.0):
    for eps, T in itertools.product(budgets, iterations):
        if method == "pgd":
            yield AttackBudget(epsilon=eps, iterations=T, gamma=eps)
        else:
            yield AttackBudget(epsilon=eps, iterations=T, mu=mu)


def search(model: CnnModel, field: BlochField, label, methods=("mim", "pgd"), budgets=TUNING_BUDGETS,
           iterations=TUNING_ITERATIONS, min_fidelity: float = 0.0, robust_trials: int = 0,
           robust_threshold: float = 0.9, repetitions: int = experiment.PAPER_REPETITIONS,
           seed: int = 0) -> tuple[AdversarialExample | None, list[AdversarialExample]]:
    """Walk the budget grid (small budgets first) until an example is accepted.

    With ``robust_trials > 0`` an accepted example must also survive the
    simulated tomography noise in at least ``robust_threshold`` of the
    trials. Returns the first qualifying example (or None) and every
    candidate tried.
    """
    tried = []
    for budget in sorted(
        ((m, b) for m in methods for b in budget_grid(m, budgets, iterations)),
        key=lambda mb: (mb[1].epsilon, mb[1].iterations, methods.index(mb[0])),
    ):
        method, b = budget
        attack = pgd if method == "pgd" else mim
        ex = attack(model, field, label, b, with_invariant=False)
        tried.append(ex)
        if not ex.fooled or ex.mean_fidelity < min_fidelity:
            continue
        attach_invariant(ex, field)
        if not ex.accepted:
            continue
        if robust_trials:
            score = robustness_score(model, ex, robust_trials, repetitions, seed=seed)
            ex.extra["robustness"] = score
            if score < robust_threshold:
                continue
        log.info("accepted %s example with budget %s", method, b)
        return ex, tried
    return None, tried
