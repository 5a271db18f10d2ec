"""Global basis functions mapping intensity vectors to J feature values.

Two kinds share one interface: a small fully connected network with a
pinned constant output, and fixed multivariate monomials.
"""
import itertools
from dataclasses import dataclass, field

import numpy as np

from fdreg import autodiff as ad

HIDDEN = (32, 32)


class BasisError(ValueError):
    pass


def monomial_exponents(degree, channels):
    """Exponent tuples of total degree <= ``degree``, constant term first."""
    exps = [e for e in itertools.product(range(degree + 1), repeat=channels) if sum(e) <= degree]
    return sorted(exps, key=lambda e: (sum(e), tuple(-x for x in e)))


def layer_shapes(J, C, hidden=HIDDEN):
    """(weight, bias) shapes of the network; weights are (out, in)."""
    sizes = [C, *hidden, J - 1]
    return [((o, i), (o,)) for i, o in zip(sizes[:-1], sizes[1:])]


def n_parameters(J, C, hidden=HIDDEN):
    return sum(int(np.prod(w)) + b[0] for w, b in layer_shapes(J, C, hidden))


@dataclass
class BasisModel:
    """Basis-function parameters.

    ``omega`` is the flat parameter vector of a learned model (empty for the
    polynomial kind).
    """

    kind: str
    J: int
    input_channels: int
    degree: int = None
    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hidden: tuple = HIDDEN

    def __post_init__(self):
        if self.J < 2:
            raise BasisError(f"J must be >= 2, got {self.J}")
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.hidden = tuple(self.hidden)
        if self.kind == "learned":
            expected = n_parameters(self.J, self.input_channels, self.hidden)
            if self.omega.shape != (expected,):
                raise BasisError(f"omega has {self.omega.size} entries, architecture needs {expected}")
        elif self.kind == "polynomial":
            if self.degree is None or self.degree < 1:
                raise BasisError("polynomial basis needs degree >= 1")
            n = len(monomial_exponents(self.degree, self.input_channels))
            if n != self.J:
                raise BasisError(f"degree {self.degree} with {self.input_channels} channels gives J={n}, not {self.J}")
            if self.omega.size:
                raise BasisError("polynomial basis has no parameters")
        else:
            raise BasisError(f"unknown basis kind {self.kind!r}")

    def with_omega(self, omega):
        return BasisModel(self.kind, self.J, self.input_channels, self.degree, np.array(omega), self.hidden)


def init_learned(J, C, seed, hidden=HIDDEN):
    """Seeded network whose first layer places its kinks inside [0, 1]^C."""
    if J < 2 or C < 1:
        raise BasisError(f"need J >= 2 and C >= 1, got J={J}, C={C}")
    rng = np.random.default_rng(seed)
    parts = []
    for k, ((o, i), _) in enumerate(layer_shapes(J, C, hidden)):
        if k == 0:
            w = rng.normal(0.0, 6.0 / np.sqrt(i), size=(o, i))
            b = -np.einsum("oi,oi->o", w, rng.uniform(0.0, 1.0, size=(o, i)))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / i), size=(o, i))
            b = rng.normal(0.0, 0.1, size=o)
        parts += [w.ravel(), b]
    return BasisModel("learned", J, C, omega=np.concatenate(parts), hidden=hidden)


def polynomial(degree, C=1):
    return BasisModel("polynomial", len(monomial_exponents(degree, C)), C, degree=degree)


def _unpack(model, omega):
    params, pos = [], 0
    for wshape, bshape in layer_shapes(model.J, model.input_channels, model.hidden):
        nw = wshape[0] * wshape[1]
        w = ad.reshape(ad.getitem(omega, slice(pos, pos + nw)), wshape)
        pos += nw
        b = ad.reshape(ad.getitem(omega, slice(pos, pos + bshape[0])), (bshape[0], 1))
        pos += bshape[0]
        params.append((w, b))
    return params


def features(model, x, omega=None):
    """Tape version of :func:`eval_basis`.

    ``x`` is a (C, N) tensor of intensities; ``omega`` the parameter tensor of
    a learned model (defaults to a constant copy of ``model.omega``).
    Returns a (J, N) tensor whose first row is the constant 1.
    """
    x = ad.as_tensor(x)
    if x.shape[0] != model.input_channels:
        raise BasisError(f"basis expects {model.input_channels} channels, got {x.shape[0]}")
    n = x.shape[1]
    ones = ad.Tensor(np.ones((1, n), dtype=x.dtype))
    if model.kind == "polynomial":
        chans = [ad.getitem(x, slice(c, c + 1)) for c in range(model.input_channels)]
        powers = [[None] + [ch] for ch in chans]
        for c, ch in enumerate(chans):
            for _ in range(2, model.degree + 1):
                powers[c].append(powers[c][-1] * ch)
        rows = []
        for e in monomial_exponents(model.degree, model.input_channels):
            term = None
            for c, k in enumerate(e):
                if k:
                    term = powers[c][k] if term is None else term * powers[c][k]
            rows.append(ones if term is None else term)
        return ad.concat(rows, axis=0)
    if omega is None:
        omega = ad.Tensor(model.omega)
    h = x
    layers = _unpack(model, omega)
    for k, (w, b) in enumerate(layers):
        h = ad.dense(w, h, b, "silu" if k < len(layers) - 1 else None)
    return ad.concat([ones, h], axis=0)


def eval_basis(model, intensities):
    """Basis values for an intensity field of shape (C, ...) -> (J, ...)."""
    x = np.asarray(intensities, dtype=np.float64)
    if x.shape[0] != model.input_channels:
        raise BasisError(f"basis expects {model.input_channels} channels, got {x.shape[0]}")
    out = features(model, x.reshape(x.shape[0], -1)).value
    return out.reshape((model.J,) + x.shape[1:])
