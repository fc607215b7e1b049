"""Real spherical-harmonics colour evaluation up to degree 3."""

from __future__ import annotations

import torch

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Basis values (..., (degree+1)^2) for unit directions (..., 3)."""
    x, y, z = dirs.unbind(-1)
    out = [torch.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy),
                C2[3] * x * z, C2[4] * (xx - yy)]
    if degree >= 3:
        out += [C3[0] * y * (3 * xx - yy), C3[1] * x * y * z, C3[2] * y * (4 * zz - xx - yy),
                C3[3] * z * (2 * zz - 3 * xx - 3 * yy), C3[4] * x * (4 * zz - xx - yy),
                C3[5] * z * (xx - yy), C3[6] * x * (xx - 3 * yy)]
    return torch.stack(out, dim=-1)


def sh_to_color(sh_coeffs: torch.Tensor, view_dir: torch.Tensor, degree: int | None = None) -> torch.Tensor:
    """RGB from coefficients (..., K, 3): basis dot coefficients, +0.5, clamped to [0, 1]."""
    sh_coeffs = torch.as_tensor(sh_coeffs)
    view_dir = torch.as_tensor(view_dir, dtype=sh_coeffs.dtype)
    k = sh_coeffs.shape[-2]
    if degree is None:
        degree = int(round(k**0.5)) - 1
    basis = sh_basis(view_dir, degree)[..., : (degree + 1) ** 2]
    rgb = (basis.unsqueeze(-1) * sh_coeffs[..., : (degree + 1) ** 2, :]).sum(-2) + 0.5
    return rgb.clamp(0.0, 1.0)
