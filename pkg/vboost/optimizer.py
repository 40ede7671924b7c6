from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .exceptions import NonFiniteGradientError
from .models import FitTrace, TraceRecord

# objective_with_grad(params, rng) -> (objective estimate, gradient)
ObjectiveWithGrad = Callable[[np.ndarray, np.random.Generator], Tuple[float, np.ndarray]]


@dataclass(frozen=True, eq=False)
class AdamState:
    """
    Moment estimates and hyperparameters of an Adam ascent run
    """

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    step_size: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("decay rates must lie in [0, 1)")
        if self.step_size <= 0 or self.epsilon <= 0 or self.step_count < 0:
            raise ValueError("step_size and epsilon must be positive, step_count >= 0")

    @classmethod
    def zeros(cls, n_params: int, **hyperparameters) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), **hyperparameters)


def adam_step(
    state: AdamState, params: np.ndarray, grad: np.ndarray
) -> Tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update in the ascent direction

    Args:
        state (AdamState): moments after the previous step
        params (np.ndarray): current flat parameter vector
        grad (np.ndarray): stochastic gradient of the objective at `params`
    Returns:
        (AdamState, np.ndarray): the advanced state and the updated parameters
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or params.shape != state.first_moment.shape:
        raise ValueError(
            f"shapes disagree: params {params.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}"
        )

    step = state.step_count + 1
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient at step {step}", step)

    first = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    second = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad**2
    first_hat = first / (1.0 - state.beta1**step)
    second_hat = second / (1.0 - state.beta2**step)

    updated = params + state.step_size * first_hat / (np.sqrt(second_hat) + state.epsilon)
    return replace(state, first_moment=first, second_moment=second, step_count=step), updated


def fit(
    objective_with_grad: ObjectiveWithGrad,
    init_params: np.ndarray,
    n_steps: int,
    rng: np.random.Generator,
    record_every: int = 1,
    step_size: float = 0.001,
    mask: Optional[np.ndarray] = None,
    stage: int = 0,
    verbose: bool = False,
) -> Tuple[np.ndarray, FitTrace]:
    """Run exactly `n_steps` stochastic Adam ascent steps

    Args:
        objective_with_grad: returns the objective estimate and its gradient
        init_params (np.ndarray): starting flat parameter vector
        n_steps (int): step budget
        rng (np.random.Generator): passed to every objective evaluation
        record_every (int): trace every k-th step (the last step is always kept)
        step_size (float): Adam step size
        mask (np.ndarray, optional): 0/1 vector; zero entries are held fixed
        stage (int): label stored on the returned trace
        verbose (bool): show a progress bar
    Returns:
        (np.ndarray, FitTrace): final parameters and the recorded trace
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")

    params = np.array(init_params, dtype=float)
    state = AdamState.zeros(params.shape[0], step_size=step_size)
    trace = FitTrace(stage=stage)

    for step in tqdm(range(1, n_steps + 1), disable=not verbose, desc=f"stage {stage}"):
        objective, grad = objective_with_grad(params, rng)
        if mask is not None:
            grad = grad * mask
        state, params = adam_step(state, params, grad)
        if not np.all(np.isfinite(params)):
            raise NonFiniteGradientError(f"parameters became non-finite at step {step}", step)

        if step % record_every == 0 or step == n_steps:
            trace.add_record(
                TraceRecord(step, float(objective), float(np.linalg.norm(grad)))
            )

    return params, trace
