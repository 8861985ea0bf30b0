"""Post-hoc texture operations: transfer across shapes and photometric
feature editing.

Transfer is pure plumbing: the same per-UV-vertex feature field is paired
with another shape's geometry, nothing is mutated. Editing optimizes the
feature field itself (networks and geometry frozen) so the render from the
edited view matches the painted image inside the mask, with a drift
penalty keeping unrelated features anchored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, tape
from .csae import SurfacePointSet
from .renderer import (Camera, RenderArtifacts, RendererConfig, RenderTap,
                       ShadingNets, generate_rays, render_rays)
from .texgen import UvTextureField


def transfer_texture(tex: UvTextureField, target_surface: SurfacePointSet
                     ) -> tuple[UvTextureField, SurfacePointSet]:
    """Pair the identical texture field with another shape's geometry.

    The field is transferable precisely because rendering consumes features
    by UV index; no feature is touched here, and a level mismatch is the
    only possible error.
    """
    if tex.uv_level != target_surface.uv_level:
        raise ValueError(f"UV level mismatch: texture level {tex.uv_level}, "
                         f"surface level {target_surface.uv_level}")
    return tex, target_surface


@dataclass(frozen=True)
class EditConfig:
    steps: int = 300
    lr: float = 1e-2
    drift_weight: float = 0.1
    seed: int = 0


@dataclass
class EditResult:
    tex: UvTextureField
    losses: list[float]
    masked_error_initial: float
    masked_error_final: float
    support: np.ndarray          # UV indices touched by masked pixels
    anchored: np.ndarray         # UV indices under the drift penalty


def edit_texture(tex: UvTextureField, target_image: np.ndarray,
                 mask: np.ndarray, cam: Camera, artifacts: RenderArtifacts,
                 shading: ShadingNets, render_cfg: RendererConfig,
                 edit_cfg: EditConfig = EditConfig()) -> EditResult:
    """Optimize the feature field so the render matches ``target_image``
    on the masked pixels (camera must reproduce the edited view).

    Loss: mean squared photometric error over masked pixels, plus
    drift_weight times the mean squared drift of features whose KNN
    support never touches a masked pixel. Only the field moves; the
    shading networks and geometry stay frozen.
    """
    if mask.shape != target_image.shape[:2]:
        raise ValueError("mask and image resolutions differ")
    if (cam.height, cam.width) != mask.shape:
        raise ValueError("camera resolution must match the edited image")
    if not mask.any():
        raise ValueError("mask selects no pixels")

    origin, dirs, pixel_ids = generate_rays(cam)
    mask_flat = mask.reshape(-1).astype(bool)

    # One instrumented render determines which UV indices the masked pixels
    # consume; everything else is anchored by the drift term.
    tap = RenderTap()
    feats0 = Tensor(tex.features.copy())
    render_rays(artifacts, feats0, shading, render_cfg, origin, dirs,
                pixel_ids, edit_cfg.seed, tap=tap)
    support = tap.indices_for_pixels(pixel_ids[mask_flat])
    anchored = np.setdiff1d(np.arange(len(tex.features)), support)

    masked_dirs = dirs[mask_flat]
    masked_pixel_ids = pixel_ids[mask_flat]
    target = Tensor(target_image.reshape(-1, 3)[mask_flat].astype(np.float32))

    feats = Tensor(tex.features.copy(), requires_grad=True)
    init = Tensor(tex.features.copy())
    opt = Adam([feats], lr=edit_cfg.lr)
    losses: list[float] = []
    err0 = err = None
    for step in range(edit_cfg.steps):
        with tape():
            out = render_rays(artifacts, feats, shading, render_cfg, origin,
                              masked_dirs, masked_pixel_ids, edit_cfg.seed)
            diff = out.rgb - target
            photo = ad.mean_(diff * diff)
            if len(anchored) and edit_cfg.drift_weight > 0:
                drift_d = ad.gather_rows(feats, anchored) - ad.gather_rows(init, anchored)
                loss = photo + Tensor(np.float32(edit_cfg.drift_weight)) \
                    * ad.mean_(drift_d * drift_d)
            else:
                loss = photo
            opt.zero_grad()
            backward(loss)
        opt.step()
        err = photo.item()
        if err0 is None:
            err0 = err
        losses.append(loss.item())

    return EditResult(
        tex=UvTextureField(features=feats.data.astype(np.float32),
                           uv_level=tex.uv_level),
        losses=losses,
        masked_error_initial=float(err0),
        masked_error_final=float(err),
        support=support,
        anchored=anchored,
    )
