"""Worst-case weight and input perturbations and the dual-perturbation step.

The ascent directions are the first-order maximisers of the loss inside an
L2 ball of radius rho: the gradient rescaled to norm rho. The descent step
then takes the parameter gradient at the doubly perturbed point and applies
it to the unperturbed weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import detector as det

DEGENERATE_NORM = 1e-12


class DegenerateGradient(Exception):
    """Gradient too small to define an ascent direction."""


@dataclass
class Perturbation:
    epsilon_w: np.ndarray
    epsilon_z: np.ndarray
    rho: float
    degenerate_w: bool = False
    degenerate_z: Optional[np.ndarray] = None


@dataclass
class StepRecord:
    loss_clean: float = float("nan")
    loss_perturbed: float = float("nan")
    grad_norm: float = float("nan")
    skipped: bool = False
    reason: str = ""


def weight_perturbation(grad_params: np.ndarray, rho: float) -> np.ndarray:
    """rho * g / ||g||_2 over the flattened gradient."""
    if not rho > 0:
        raise ValueError("rho must be > 0")
    g = np.asarray(grad_params, dtype=np.float64)
    norm = float(np.linalg.norm(g.ravel()))
    if norm < DEGENERATE_NORM:
        raise DegenerateGradient(f"weight gradient norm {norm:.3g}")
    return g * (rho / norm)


def input_perturbation(grad_input: np.ndarray, rho: float, batched: bool = True
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Per-element rho-normalised input gradient.

    ``grad_input`` is (B, H, W, C) when ``batched`` else a single grid.
    Returns (epsilon_z, degenerate mask per element); degenerate elements
    get a zero perturbation.
    """
    if not rho > 0:
        raise ValueError("rho must be > 0")
    g = np.asarray(grad_input, dtype=np.float64)
    if not batched:
        eps, flags = input_perturbation(g[None], rho)
        return eps[0], flags
    norms = np.sqrt((g.reshape(g.shape[0], -1) ** 2).sum(axis=1))
    degenerate = norms < DEGENERATE_NORM
    scale = np.where(degenerate, 0.0, rho / np.where(degenerate, 1.0, norms))
    return g * scale.reshape((-1,) + (1,) * (g.ndim - 1)), degenerate


GradFn = Callable[[np.ndarray, np.ndarray], tuple]


def dual_perturbation_update(theta: np.ndarray, z: np.ndarray, grad_fn: GradFn,
                             rho_w: float, rho_z: float, eta: float,
                             perturb_weights: bool = True, perturb_inputs: bool = True
                             ) -> tuple[np.ndarray, StepRecord, Perturbation]:
    """One outer SGD step at the doubly perturbed point.

    ``grad_fn(theta, z) -> (loss, grad_theta, grad_z)`` with ``z`` batched
    along its first axis. ``theta`` itself is never modified.
    """
    if not eta > 0:
        raise ValueError("eta must be > 0")
    loss, g_theta, g_z = grad_fn(theta, z)
    eps_w = np.zeros_like(theta)
    eps_z = np.zeros_like(z)
    deg_w = False
    deg_z = np.zeros(z.shape[0], dtype=bool)
    if perturb_weights:
        try:
            eps_w = weight_perturbation(g_theta, rho_w)
        except DegenerateGradient:
            deg_w = True
    if perturb_inputs:
        eps_z, deg_z = input_perturbation(g_z, rho_z)
    if perturb_weights or perturb_inputs:
        loss_p, g, _ = grad_fn(theta + eps_w, z + eps_z)
    else:
        loss_p, g = loss, g_theta
    new_theta = theta - eta * g
    rec = StepRecord(float(loss), float(loss_p), float(np.linalg.norm(g)))
    return new_theta, rec, Perturbation(eps_w, eps_z, rho_w, deg_w, deg_z)


def _detector_grad_fn(params: det.Params, targets, reg_weight: float) -> GradFn:
    def grad_fn(theta, z):
        loss, gp = det.backward(params.with_vector(theta), z, targets, reg_weight)
        return loss, gp.grad_params, gp.grad_input
    return grad_fn


def _stack(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return batch.astype(np.float64) if batch.ndim == 4 else batch[None].astype(np.float64)
    return np.stack([np.asarray(getattr(b, "values", b), dtype=np.float64) for b in batch])


def dpo_step(params: det.Params, batch, targets, rho: float = 1e-4, eta: float = 1e-3,
             perturb_weights: bool = True, perturb_inputs: bool = True,
             rho_z: Optional[float] = None, reg_weight: float = 1.0
             ) -> tuple[det.Params, StepRecord]:
    """Dual-perturbation SGD step for the detector on one batch.

    A target map with nothing supervised skips the step and returns the
    parameters unchanged.
    """
    z = _stack(batch)
    grad_fn = _detector_grad_fn(params, targets, reg_weight)
    try:
        new_vec, rec, _ = dual_perturbation_update(
            params.vector, z, grad_fn, rho, rho if rho_z is None else rho_z, eta,
            perturb_weights, perturb_inputs)
    except det.NoSupervision:
        return params, StepRecord(skipped=True, reason="no supervision")
    return params.with_vector(new_vec), rec


def compute_perturbation(params: det.Params, batch, targets, rho: float,
                         rho_z: Optional[float] = None, reg_weight: float = 1.0
                         ) -> Perturbation:
    """Ascent perturbations for weights and inputs at the current point."""
    z = _stack(batch)
    _, gp = det.backward(params, z, targets, reg_weight)
    deg_w = False
    try:
        eps_w = weight_perturbation(gp.grad_params, rho)
    except DegenerateGradient:
        eps_w = np.zeros_like(params.vector)
        deg_w = True
    eps_z, deg_z = input_perturbation(gp.grad_input, rho if rho_z is None else rho_z)
    return Perturbation(eps_w, eps_z, rho, deg_w, deg_z)


def sharpness(theta: np.ndarray, loss_fn: Callable[[np.ndarray], float],
              grad: np.ndarray, rho: float) -> float:
    """L(theta + eps_hat) - L(theta) with eps_hat the normalised gradient."""
    if rho == 0:
        return 0.0
    try:
        eps = weight_perturbation(grad, rho)
    except DegenerateGradient:
        return 0.0
    return float(loss_fn(theta + eps) - loss_fn(theta))


def sharpness_probe(params: det.Params, batch, targets, rho: float = 1e-4,
                    reg_weight: float = 1.0) -> float:
    """First-order estimate of the loss sharpness around the current weights."""
    if rho == 0:
        return 0.0
    z = _stack(batch)
    _, gp = det.backward(params, z, targets, reg_weight)
    return sharpness(params.vector,
                     lambda v: det.loss_at(params.with_vector(v), z, targets, reg_weight),
                     gp.grad_params, rho)
