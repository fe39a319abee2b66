import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from evkd.errors import LengthMismatch, ShapeMismatch
from evkd.losses import GWF_EPS, LossReport, gwf_loss

logger = logging.getLogger(__name__)


@dataclass
class SpectralMap:
    real: np.ndarray
    imag: np.ndarray

    @property
    def complex(self):
        return self.real + 1j * self.imag


def softmax2d(score_map):
    """Softmax over every cell of a score map (max-subtracted)."""
    return softmax(np.asarray(score_map, dtype=np.float64), axis=None)


def _phase_matrix(size, denominator):
    k = np.arange(size)
    return np.exp(2j * np.pi * np.outer(k, k) / denominator)


def _phase_matrices(shape, literal):
    m, n = shape
    return _phase_matrix(m, m), _phase_matrix(n, m if literal else n)


def dft2d(grid, literal=False):
    """x[m, n] = 1/(MN) sum_k sum_l X[k, l] exp(i 2 pi (km/M + ln/N)), row then column.

    literal=True puts M in both phase denominators.
    """
    grid = np.asarray(grid, dtype=np.complex128)
    if grid.ndim != 2:
        raise ShapeMismatch(f"dft2d expects a 2-D grid, got {grid.shape}")
    rows, cols = _phase_matrices(grid.shape, literal)
    out = rows @ grid @ cols.T / grid.size
    return SpectralMap(out.real.copy(), out.imag.copy())


def dft2d_naive(grid, literal=False):
    """Quadruple-loop reference for dft2d."""
    grid = np.asarray(grid, dtype=np.complex128)
    m_size, n_size = grid.shape
    col_denominator = m_size if literal else n_size
    out = np.zeros(grid.shape, dtype=np.complex128)
    for m in range(m_size):
        for n in range(n_size):
            acc = 0j
            for k in range(m_size):
                for l in range(n_size):
                    phase = 2 * np.pi * (k * m / m_size + l * n / col_denominator)
                    acc += grid[k, l] * np.exp(1j * phase)
            out[m, n] = acc / (m_size * n_size)
    return SpectralMap(out.real, out.imag)


def _real_dft_backward(grad_real, literal=False):
    rows, cols = _phase_matrices(grad_real.shape, literal)
    return (rows.T @ grad_real @ cols).real / grad_real.size


def softmax2d_backward(grad_prob, prob):
    """Gradient w.r.t. the logits given the gradient w.r.t. the softmax output `prob`."""
    return prob * (grad_prob - np.sum(grad_prob * prob))


def _minmax(raw, eps):
    lo, hi = raw.min(), raw.max()
    spread = hi - lo
    if not spread > 0:
        logger.warning("Degenerate signature range, using the constant 1/2 grid")
        return np.full(raw.shape, 0.5), None
    scale = 1 - 2 * eps
    return eps + scale * (raw - lo) / spread, (lo, spread, scale)


def _minmax_backward(grad, raw, stats):
    if stats is None:
        return np.zeros_like(grad)
    lo, spread, scale = stats
    out = scale / spread * grad
    i_lo, i_hi = np.argmin(raw), np.argmax(raw)
    out.flat[i_lo] -= scale / spread * np.sum(grad)
    coeff = scale / spread**2 * np.sum(grad * (raw - lo))
    out.flat[i_hi] -= coeff
    out.flat[i_lo] += coeff
    return out


def _signature_forward(score_map, eps, literal):
    prob = softmax2d(score_map)
    raw = dft2d(prob, literal).real
    signature, stats = _minmax(raw, eps)
    return signature, (prob, raw, stats)


def temporal_signature(score_map, eps=GWF_EPS, literal=False, normalize=True):
    """Real part of the DFT of the softmaxed map, min-max scaled into [eps, 1 - eps].

    A constant real part cannot be scaled and maps to the constant 1/2 grid.
    normalize=False returns the unscaled real part.
    """
    if not normalize:
        return dft2d(softmax2d(score_map), literal).real
    signature, _ = _signature_forward(score_map, eps, literal)
    return signature


def tft_kd_loss(student_maps, teacher_maps, alpha=2, beta=4, eps=GWF_EPS, literal=False):
    """Per-frame GWF loss between student and teacher temporal signatures, averaged over frames.

    The gradient is w.r.t. the student logits, stacked as (n, M, N).
    """
    if len(student_maps) != len(teacher_maps) or len(student_maps) == 0:
        raise LengthMismatch(
            f"Need equal non-empty map lists, got {len(student_maps)} and {len(teacher_maps)}"
        )
    n = len(student_maps)
    value = 0.0
    grads = []
    for student, teacher in zip(student_maps, teacher_maps):
        student = np.asarray(student, dtype=np.float64)
        teacher = np.asarray(teacher, dtype=np.float64)
        if student.shape != teacher.shape or student.ndim != 2:
            raise ShapeMismatch(f"Score maps {student.shape} and {teacher.shape} differ")
        c_student, (prob, raw, stats) = _signature_forward(student, eps, literal)
        c_teacher, _ = _signature_forward(teacher, eps, literal)
        report = gwf_loss(c_student, c_teacher, alpha, beta, eps)
        value += report.value
        grad = _minmax_backward(report.grad / n, raw, stats)
        grad = _real_dft_backward(grad, literal)
        grads.append(softmax2d_backward(grad, prob))
    return LossReport(value / n, np.stack(grads))
