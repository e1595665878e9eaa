"""Fast evaluation of piecewise polynomials by Horner's rule."""

import numpy as np
from scipy.interpolate import BPoly, PPoly


class HornerPoly:
    """Piecewise polynomial in local power form, extrapolated by the end pieces.

    Uniform breakpoints are located by index arithmetic, others by binary
    search; both are several times faster than evaluating in Bernstein form.
    """

    def __init__(self, poly):
        if isinstance(poly, BPoly):
            poly = PPoly.from_bernstein_basis(poly)
        self.x = np.asarray(poly.x, dtype=float)
        self.c = np.ascontiguousarray(poly.c)
        steps = np.diff(self.x)
        self.h = float(steps[0])
        self.uniform = bool(np.allclose(steps, self.h, rtol=1e-12, atol=0.0))
        if not self.uniform:
            # cells no wider than the smallest step hold at most one breakpoint
            self.h = float(steps.min())
            cells = int(np.ceil((self.x[-1] - self.x[0]) / self.h)) + 1
            edges = self.x[0] + self.h * np.arange(cells)
            self._lut = np.clip(np.searchsorted(self.x, edges, side="right") - 1, 0, len(steps) - 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        n = self.c.shape[1]
        if self.uniform:
            i = np.floor((x - self.x[0]) / self.h)
            i = np.clip(np.nan_to_num(i, nan=0.0), 0, n - 1).astype(np.intp)
        else:
            cell = np.floor((x - self.x[0]) / self.h)
            cell = np.clip(np.nan_to_num(cell, nan=0.0), 0, len(self._lut) - 1).astype(np.intp)
            i = self._lut[cell]
            i = np.minimum(i + (x >= self.x[np.minimum(i + 1, n)]), n - 1)
        dx = x - self.x[i]
        y = self.c[0, i]
        for row in self.c[1:]:
            y = y * dx + row[i]
        return y
