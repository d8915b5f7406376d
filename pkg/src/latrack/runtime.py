"""Online tracking loop: init from the first-frame box, crop around the
previous prediction, run the (optionally fused) model, decode and map back.

Latents are encoded deterministically (zero noise at the operating timestep);
the template is encoded once per sequence and never updated.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import add_noise, encode_batch
from .data import box_to_crop_coords, clip_box, crop_search, crop_template, map_box_to_image
from .errors import ConfigError, DataError
from .head import decode_box, hanning_window
from .model import TrackerModel
from .text import tokenize

MODES = ("rgb", "rgb+language", "rgb+depth", "rgb+thermal", "rgb+event")


@dataclass
class TrackerState:
    mode: str
    aux_modality: str | None
    sub_scope: str | None
    template_lat: torch.Tensor  # [1, C_z, h_t, w_t]
    template_aux_lat: torch.Tensor | None
    cond: torch.Tensor  # [1, L_c, d_cond]
    prev_box: tuple  # pixel (x, y, w, h)
    canvas: int
    window: np.ndarray
    window_weight: float


def _encode_deterministic(model, pixels):
    lat = encode_batch(model.codec, pixels)
    return add_noise(lat, model.timestep, model.schedule, sample=False)


def _resolve_scope(model, aux_modality):
    if aux_modality in model.sub:
        return aux_modality
    if "generalist" in model.sub:
        return "generalist"
    if model.scopes:
        raise ConfigError(
            f"mode rgb+{aux_modality} incompatible with loaded sub-module scopes {model.scopes}"
        )
    raise ConfigError(f"mode rgb+{aux_modality} requires a sub-module but none is loaded")


def init_track(frames0, gt_box0, caption, mode, model: TrackerModel, window_weight=0.49,
               min_box_px=2.0):
    """Build the per-sequence tracker state from frame 0."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    x, y, w, h = gt_box0
    if w <= 0 or h <= 0:
        raise DataError(f"degenerate initial box {gt_box0}")

    aux = mode.split("+")[1] if mode not in ("rgb", "rgb+language") else None
    scope = _resolve_scope(model, aux) if aux else None

    rgb0 = frames0["rgb"] if isinstance(frames0, dict) else frames0
    canvas = rgb0.shape[0]
    tmpl = crop_template(rgb0, gt_box0)
    tmpl_lat = _encode_deterministic(model, torch.from_numpy(tmpl.pixels).unsqueeze(0))

    tmpl_aux_lat = None
    if aux is not None:
        if aux not in frames0:
            raise DataError(f"mode {mode} needs a frame-0 {aux} stream")
        aux_crop = crop_template(frames0[aux], gt_box0, modality=aux)
        tmpl_aux_lat = _encode_deterministic(model, torch.from_numpy(aux_crop.pixels).unsqueeze(0))

    text = caption if (mode == "rgb+language" and caption) else ""
    ids = tokenize(text, model.vocab, model.model_cfg["cond_length"]).unsqueeze(0)
    cond = model.encode_cond(ids)

    f = model.codec.f
    map_size = 128 // f  # search crops are 128x128
    return TrackerState(
        mode=mode, aux_modality=aux, sub_scope=scope,
        template_lat=tmpl_lat, template_aux_lat=tmpl_aux_lat, cond=cond,
        prev_box=tuple(float(v) for v in gt_box0), canvas=canvas,
        window=hanning_window(map_size, map_size), window_weight=window_weight,
    )


def _sanitize(box, canvas, min_px):
    x, y, w, h = clip_box(box, canvas)
    if w < min_px or h < min_px:
        cx, cy = x + w / 2, y + h / 2
        w, h = max(w, min_px), max(h, min_px)
        x, y, w, h = clip_box((cx - w / 2, cy - h / 2, w, h), canvas)
    return (x, y, w, h)


def track_frame(state: TrackerState, frames, model: TrackerModel, min_box_px=2.0):
    """One online step; returns (pixel box, confidence, state)."""
    rgb = frames["rgb"] if isinstance(frames, dict) else frames
    search = crop_search(rgb, state.prev_box)
    s_lat = _encode_deterministic(model, torch.from_numpy(search.pixels).unsqueeze(0))

    aux_pair = None
    if state.aux_modality is not None:
        if not isinstance(frames, dict) or state.aux_modality not in frames:
            raise DataError(f"missing {state.aux_modality} frame in mode {state.mode}")
        aux_crop = crop_search(frames[state.aux_modality], state.prev_box,
                               modality=state.aux_modality)
        a_lat = _encode_deterministic(model, torch.from_numpy(aux_crop.pixels).unsqueeze(0))
        aux_pair = (a_lat, state.template_aux_lat)

    with torch.no_grad():
        features = model.forward_features(s_lat, state.template_lat, state.cond,
                                          sub_scope=state.sub_scope, aux_pair=aux_pair)
        maps = model.head(features)
    box_norm = decode_box(maps.single(0), window=state.window,
                          window_weight=state.window_weight)
    box_px = map_box_to_image(box_norm, search.crop_params, state.canvas)
    box_px = _sanitize(box_px, state.canvas, min_box_px)
    state.prev_box = box_px
    return box_px, box_norm.confidence, state


def run_sequence(record, mode, model, results_path=None, window_weight=0.49,
                 min_box_px=2.0, caption=None):
    """OPE over one sequence; frame 0 reports the ground-truth box at score 1.

    Returns (boxes [K, 4], scores [K]) and optionally writes the results file.
    """
    try:
        frames0 = {m: record.frame(0, m) for m in ("rgb", "depth", "thermal", "event")}
        state = init_track(frames0, record.boxes[0], caption or record.caption,
                           mode, model, window_weight=window_weight, min_box_px=min_box_px)
        boxes = [tuple(float(v) for v in record.boxes[0])]
        scores = [1.0]
        for k in range(1, record.length):
            frames = {"rgb": record.frame(k, "rgb")}
            if state.aux_modality:
                frames[state.aux_modality] = record.frame(k, state.aux_modality)
            box, score, state = track_frame(state, frames, model, min_box_px=min_box_px)
            boxes.append(box)
            scores.append(score)
    except OSError as exc:
        raise DataError(f"sequence {record.name}: {exc}") from exc

    if results_path is not None:
        results_path = Path(results_path)
        results_path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            f"{b[0]:.2f},{b[1]:.2f},{b[2]:.2f},{b[3]:.2f},{s:.6f}"
            for b, s in zip(boxes, scores)
        ]
        results_path.write_text("\n".join(lines) + "\n")
    return np.asarray(boxes, dtype=np.float64), np.asarray(scores, dtype=np.float64)


def track_dataset(dataset, mode, model, results_root, window_weight=0.49, min_box_px=2.0,
                  log=None):
    """Run every sequence of a split; results under `<results_root>/<mode>/`."""
    out_dir = Path(results_root) / mode
    for i, record in enumerate(dataset.records):
        run_sequence(record, mode, model, results_path=out_dir / f"{record.name}.txt",
                     window_weight=window_weight, min_box_px=min_box_px)
        if log and (i + 1) % 5 == 0:
            log(f"{mode}: tracked {i + 1}/{len(dataset)} sequences")
    return out_dir
