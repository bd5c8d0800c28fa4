"""Gradient explanations for the classifier.

The primary explanation differentiates the output probability with respect
to the input pixels, takes absolute values, averages over colour channels
and standardizes the result. ``gradcam_last_conv`` is the classic variant
that weights the final feature maps by their spatially averaged gradients.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .augment import load_image
from .errors import ConstantMapWarning, LayerNotFound, NonFiniteGradient, ShapeMismatch, WriteError
from .model import ClassifierModel, to_tensor

logger = logging.getLogger(__name__)

STD_EPSILON = 1e-8
CONSTANT_SIGMA = 1e-12


@dataclass
class SaliencyMap:
    values: np.ndarray
    standardized: bool = False
    source_image: str | None = None
    model_output: float = float("nan")


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(iter(model.parameters()), torch.zeros((), dtype=torch.float64)).dtype


def _check_input(model: nn.Module, image: np.ndarray) -> None:
    if image.ndim != 3:
        raise ShapeMismatch(f"expected an H x W x C image, got shape {image.shape}")
    spec = getattr(model, "backbone_spec", None)
    if spec is not None and tuple(image.shape[:2]) != tuple(spec.input_size):
        raise ShapeMismatch(f"image is {image.shape[:2]}, model expects {spec.input_size}")


def model_output(model: nn.Module, image: np.ndarray) -> float:
    model.eval()
    with torch.no_grad():
        return float(model(to_tensor(image, _model_dtype(model))).reshape(-1)[0])


def input_gradient_saliency(model: nn.Module, image: np.ndarray) -> np.ndarray:
    """d(output probability) / d(input pixel) by reverse-mode autodiff; H x W x C, eval mode."""
    image = np.asarray(image)
    _check_input(model, image)
    model.eval()
    x = to_tensor(image, _model_dtype(model)).requires_grad_(True)
    theta = model(x).reshape(-1)[0]
    (grad,) = torch.autograd.grad(theta, x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    out = grad[0].permute(1, 2, 0).detach().cpu().numpy()
    if not np.all(np.isfinite(out)):
        raise NonFiniteGradient("input gradient contains NaN or inf")
    return out


def reduce_and_rectify(grad: np.ndarray) -> np.ndarray:
    """Absolute value, then mean over the channel axis: H x W x C -> H x W."""
    return np.abs(np.asarray(grad)).mean(axis=-1)


def standardize(heatmap: np.ndarray, source_image: str | None = None,
                model_output: float = float("nan")) -> SaliencyMap:
    """(h - mean) / (std + 1e-8) with the population std; constant maps become zeros with a warning."""
    h = np.asarray(heatmap, dtype=np.float64)
    mu, sigma = h.mean(), h.std()
    if sigma < CONSTANT_SIGMA:
        warnings.warn("heatmap is constant; returning the zero map", ConstantMapWarning, stacklevel=2)
        values = np.zeros_like(h)
    else:
        values = (h - mu) / (sigma + STD_EPSILON)
    return SaliencyMap(values, standardized=True, source_image=source_image, model_output=model_output)


# --------------------------------------------------------------------------
# rendering


def _as_uint8(image: np.ndarray) -> np.ndarray:
    """uint8 passes through; floating images are taken to be in [0, 1]."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def colorize(values: np.ndarray, cmap: str = "jet") -> np.ndarray:
    """Min-max map onto a colormap; a flat map takes the colormap's midpoint everywhere."""
    from matplotlib import colormaps

    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    unit = (v - v.min()) / span if span > 0 else np.full_like(v, 0.5)
    return np.rint(colormaps[cmap](unit)[..., :3] * 255).astype(np.uint8)


def render_side_by_side(image: np.ndarray, saliency: SaliencyMap, out: str | Path,
                        alpha: float = 0.5) -> tuple[Path, Path]:
    """Write ``out`` (image | heatmap) and ``<stem>_overlay.png`` (heatmap blended over the image)."""
    if not saliency.standardized:
        raise ValueError("render expects a standardized saliency map")
    out = Path(out)
    rgb = _as_uint8(image)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=-1)
    heat = colorize(saliency.values)
    if heat.shape[:2] != rgb.shape[:2]:
        heat = np.asarray(Image.fromarray(heat).resize((rgb.shape[1], rgb.shape[0]), Image.BILINEAR))
    composite = np.concatenate([rgb, heat], axis=1)
    overlay = np.rint((1 - alpha) * rgb + alpha * heat).astype(np.uint8)
    overlay_path = out.with_name(f"{out.stem}_overlay.png")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(composite).save(out, format="PNG")
        Image.fromarray(overlay).save(overlay_path, format="PNG")
    except OSError as exc:
        raise WriteError(f"cannot write {out}: {exc}") from exc
    return out, overlay_path


def write_heatmap_text(values: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(values), fmt="%.9e", delimiter="\t")
    return path


def read_heatmap_text(path: str | Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter="\t"))


# --------------------------------------------------------------------------
# full procedure


def explain_image(model: ClassifierModel, image_path: str | Path, out_dir: str | Path,
                  rescale: float = 1.0 / 255.0) -> SaliencyMap:
    """Load, resize and rescale an image, then write the composite, overlay and ``heatmap.txt``."""
    out_dir = Path(out_dir)
    image = load_image(image_path, model.backbone_spec.input_size) * rescale
    grad = input_gradient_saliency(model, image)
    saliency = standardize(reduce_and_rectify(grad), source_image=str(image_path),
                           model_output=model_output(model, image))
    render_side_by_side(image, saliency, out_dir / "saliency" / f"{Path(image_path).stem}.png")
    write_heatmap_text(saliency.values, out_dir / "heatmap.txt")
    return saliency


# --------------------------------------------------------------------------
# classic Grad-CAM on the final convolutional feature map


def gradcam_feature_map(model: nn.Module, image: np.ndarray, layer: str = "backbone") -> np.ndarray:
    """ReLU(sum_k w_k A_k) at the resolution of ``layer``'s output, w_k = mean spatial gradient."""
    modules = dict(model.named_modules())
    if layer not in modules:
        raise LayerNotFound(f"model has no submodule {layer!r}")
    image = np.asarray(image)
    _check_input(model, image)
    captured = {}

    def hook(_module, _inputs, output):
        if isinstance(output, torch.Tensor) and output.requires_grad:
            output.retain_grad()
        captured["maps"] = output

    handle = modules[layer].register_forward_hook(hook)
    try:
        model.eval()
        # input requires grad so the map stays in the graph even with a frozen backbone
        x = to_tensor(image, _model_dtype(model)).requires_grad_(True)
        theta = model(x).reshape(-1)[0]
    finally:
        handle.remove()
    maps = captured.get("maps")
    if not isinstance(maps, torch.Tensor) or maps.dim() != 4:
        raise LayerNotFound(f"{layer!r} did not produce an N x C x H x W feature map")
    if maps.requires_grad:
        theta.backward()
    grads = maps.grad if maps.grad is not None else torch.zeros_like(maps)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * maps).sum(dim=1))[0]
    return cam.detach().cpu().numpy()


def gradcam_last_conv(model: nn.Module, image: np.ndarray, layer: str = "backbone") -> np.ndarray:
    """Grad-CAM heatmap bilinearly upsampled to the input's H x W."""
    cam = gradcam_feature_map(model, image, layer)
    h, w = np.asarray(image).shape[:2]
    up = F.interpolate(torch.from_numpy(cam)[None, None], size=(h, w), mode="bilinear", align_corners=False)
    return up[0, 0].numpy()
