"""Independent brute-force oracles.

Each function re-derives its quantity directly from the defining formula,
with plain Python/numpy loops and no code shared with the package. They are
intentionally slow and simple.
"""

import math

import numpy as np


def frobenius_oracle(maps) -> float:
    """Mean of per-sample sqrt(sum of squared entries)."""
    total = 0.0
    for sample_map in maps:
        acc = 0.0
        for value in np.asarray(sample_map, dtype=np.float64).flatten():
            acc += value * value
        total += math.sqrt(acc)
    return total / len(maps)


def norm_oracle(z, z_prime) -> float:
    """Mean |l2(z_i) - l2(z'_i)|."""
    z = np.asarray(z, dtype=np.float64)
    z_prime = np.asarray(z_prime, dtype=np.float64)
    total = 0.0
    for i in range(len(z)):
        norm_a = math.sqrt(sum(v * v for v in z[i]))
        norm_b = math.sqrt(sum(v * v for v in z_prime[i]))
        total += abs(norm_a - norm_b)
    return total / len(z)


def contrastive_oracle(z, z_prime, rho_min, mu) -> float:
    """Mean of ||u(z') - u(rho)|| + max(0, mu - ||u(z') - u(z)||)."""

    def unit(vec):
        norm = math.sqrt(sum(v * v for v in vec))
        return [v / norm for v in vec]

    def dist(a, b):
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))

    z = np.asarray(z, dtype=np.float64)
    z_prime = np.asarray(z_prime, dtype=np.float64)
    rho_min = np.asarray(rho_min, dtype=np.float64)
    total = 0.0
    for i in range(len(z)):
        attract = dist(unit(z_prime[i]), unit(rho_min[i]))
        repel = max(0.0, mu - dist(unit(z_prime[i]), unit(z[i])))
        total += attract + repel
    return total / len(z)


def total_oracle(frobenius, norm, contrastive, alpha, beta) -> float:
    return alpha * frobenius + beta * norm + contrastive


def hamming_oracle(true_sets, pred_sets) -> float:
    """Per-sample set IoU, averaged, as a percentage."""
    scores = []
    for truth, pred in zip(true_sets, pred_sets):
        truth, pred = set(truth), set(pred)
        union = truth | pred
        scores.append(len(truth & pred) / len(union))
    return 100.0 * sum(scores) / len(scores)


def least_similar_oracle(rho_img, prompt_matrix) -> int:
    """Exhaustive argmin of cosine similarity, first index on ties."""
    rho_img = np.asarray(rho_img, dtype=np.float64)
    best_index, best_value = 0, None
    for i, row in enumerate(np.asarray(prompt_matrix, dtype=np.float64)):
        cos = float(
            np.dot(row, rho_img)
            / (math.sqrt(np.dot(row, row)) * math.sqrt(np.dot(rho_img, rho_img)))
        )
        if best_value is None or cos < best_value:
            best_index, best_value = i, cos
    return best_index


def _gaussian_weights(size: int, sigma: float) -> np.ndarray:
    center = (size - 1) / 2
    weights = np.zeros((size, size), dtype=np.float64)
    for u in range(size):
        for v in range(size):
            weights[u, v] = math.exp(
                -((u - center) ** 2 + (v - center) ** 2) / (2 * sigma**2)
            )
    return weights / weights.sum()


def ssim_oracle(
    a,
    b,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    value_range: float = 1.0,
) -> float:
    """Textbook windowed SSIM over valid positions, channels averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    weights = _gaussian_weights(window, sigma)
    c1 = (k1 * value_range) ** 2
    c2 = (k2 * value_range) ** 2
    channel_means = []
    for ch in range(a.shape[0]):
        values = []
        height, width = a.shape[1:]
        for i in range(height - window + 1):
            for j in range(width - window + 1):
                pa = a[ch, i : i + window, j : j + window]
                pb = b[ch, i : i + window, j : j + window]
                mu_a = float((weights * pa).sum())
                mu_b = float((weights * pb).sum())
                var_a = float((weights * pa * pa).sum()) - mu_a * mu_a
                var_b = float((weights * pb * pb).sum()) - mu_b * mu_b
                cov = float((weights * pa * pb).sum()) - mu_a * mu_b
                values.append(
                    ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                    / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
                )
        channel_means.append(sum(values) / len(values))
    return sum(channel_means) / len(channel_means)
