"""Recurrent context-motion matting network.

Per frame the network encodes the image into context features, obtains a
backward flow to the previous frame, fuses warped previous features, a learned
correlation and encoded flow into a motion feature, updates a recurrent hidden
state with a separable ConvGRU, and decodes alpha and foreground from it.

Three wirings are supported for ablation:

``baseline``
    context features -> one 3x3 conv (tanh) -> decoders; no recurrence.
``gru``
    context features -> ConvGRU -> decoders.
``motion``
    the full operator: warp, correlate, encode flow, fuse, ConvGRU.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError, ValidationError
from .layers import Conv2d, ParamStore, SepConvGRU, gru_step
from .tensor import Tensor

ABLATIONS = ("baseline", "gru", "motion")
PROVIDERS = ("oracle", "tiny")

SKIP_CHANNELS = 32
CORR_CHANNELS = 32
FLOW_ENC_CHANNELS = 32
MOTION_CHANNELS = 62
DECODER_CHANNELS = 32


@dataclass
class ModelConfig:
    reduction: int = 8
    channels: int = 64
    hidden: int = 64
    flow_provider: str = "oracle"
    ablation: str = "motion"
    flow_levels: int = 3
    flow_channels: int = 8

    KEYS = {
        "encoder.reduction": ("reduction", int),
        "encoder.channels": ("channels", int),
        "hidden.channels": ("hidden", int),
        "flow.provider": ("flow_provider", str),
        "flow.levels": ("flow_levels", int),
        "flow.channels": ("flow_channels", int),
        "ablation": ("ablation", str),
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        s = self.reduction
        if s < 2 or s & (s - 1):
            raise ValidationError(f"encoder.reduction must be a power of two >= 2, got {s}")
        if self.flow_provider not in PROVIDERS:
            raise ValidationError(f"flow.provider must be one of {PROVIDERS}")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"ablation must be one of {ABLATIONS}")
        if self.channels < 1 or self.hidden < 1:
            raise ValidationError("channel counts must be positive")

    @property
    def stages(self) -> int:
        return int(math.log2(self.reduction))

    def stage_widths(self) -> list[int]:
        return [max(8, self.channels >> (self.stages - k)) for k in range(1, self.stages + 1)]

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for key, value in kv.items():
            if key in cls.KEYS:
                attr, conv = cls.KEYS[key]
                kwargs[attr] = conv(value)
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        return {key: str(getattr(self, attr)) for key, (attr, _) in self.KEYS.items()}

    @classmethod
    def load(cls, path) -> "ModelConfig":
        from .config import read_kv

        return cls.from_mapping(read_kv(Path(path)))


@dataclass
class EncoderOutput:
    context: Tensor
    skips: list[Tensor]  # coarse -> fine, 32 channels each


@dataclass
class StepState:
    hidden: Tensor
    prev_context: EncoderOutput
    prev_frame: Tensor


@dataclass
class MattingOutput:
    alpha: Tensor
    foreground: Tensor


@dataclass
class Rollout:
    outputs: list[MattingOutput]
    states: list[StepState] = field(default_factory=list)
    flows: list[Tensor] = field(default_factory=list)


def check_flow(flow: Tensor) -> None:
    _, c, h, w = flow.shape
    if c != 2:
        raise ShapeError(f"flow must have 2 channels, got {c}")
    bound = 0.5 * max(h, w)
    if not np.isfinite(flow.data).all():
        raise ValidationError("flow contains non-finite values")
    if np.abs(flow.data).max(initial=0.0) > bound:
        raise ValidationError(f"flow magnitude exceeds {bound} px")


class TinyFlowNet:
    """Coarse-to-fine residual flow estimator, parameters under ``flow.*``.

    Each level warps the previous frame's features by the current estimate,
    concatenates them with the current frame's features and the estimate,
    and predicts a residual with three convs; the last conv starts at zero so
    an untrained net predicts zero flow.
    """

    def __init__(self, store: ParamStore, levels: int = 3, channels: int = 8, seed: int = 0):
        self.levels = levels
        self.channels = channels
        c = channels
        self.feat1 = Conv2d(store, "flow.feat.conv1", 3, c, 3, seed=seed)
        self.feat2 = Conv2d(store, "flow.feat.conv2", c, c, 3, seed=seed)
        self.heads = []
        for lvl in range(levels):
            self.heads.append((
                Conv2d(store, f"flow.level{lvl}.conv1", 2 * c + 2, 16, 3, seed=seed),
                Conv2d(store, f"flow.level{lvl}.conv2", 16, 16, 3, seed=seed),
                Conv2d(store, f"flow.level{lvl}.conv3", 16, 2, 3, seed=seed, zero_init=True),
            ))

    def features(self, img: Tensor) -> Tensor:
        return T.relu(self.feat2(T.relu(self.feat1(img))))

    def __call__(self, frame_t: Tensor, frame_prev: Tensor) -> Tensor:
        n, _, h, w = frame_t.shape
        div = 2 ** (self.levels - 1)
        if h % div or w % div:
            raise ShapeError(f"frame {h}x{w} not divisible by {div} for {self.levels} flow levels")
        flow = None
        for lvl in range(self.levels):
            k = 2 ** (self.levels - 1 - lvl)
            lh, lw = h // k, w // k
            if k > 1:
                a = T.bilinear_resize(frame_t, lh, lw)
                b = T.bilinear_resize(frame_prev, lh, lw)
            else:
                a, b = frame_t, frame_prev
            fa, fb = self.features(a), self.features(b)
            if flow is None:
                flow = T.zeros((n, 2, lh, lw), frame_t.precision)
                warped = fb
            else:
                flow = T.bilinear_resize(flow, lh, lw, 2.0)
                warped = T.backwarp(fb, flow)
            c1, c2, c3 = self.heads[lvl]
            x = T.concat_channels([fa, warped, flow])
            flow = T.add(flow, c3(T.relu(c2(T.relu(c1(x))))))
        return flow


class ContextMotionNet:
    """The matting network; all weights live in ``self.params``."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, precision: str = "single"):
        self.cfg = cfg or ModelConfig()
        self.seed = seed
        self.precision = precision
        self.params = ParamStore(precision)
        self._build()

    # -- construction -----------------------------------------------------

    def _build(self) -> None:
        cfg, p, seed = self.cfg, self.params, self.seed
        widths = cfg.stage_widths()
        self.enc_stages = []
        cin = 3
        for k, wk in enumerate(widths, start=1):
            self.enc_stages.append((
                Conv2d(p, f"encoder.stage{k}.down", cin, wk, 3, stride=2, pad=1, seed=seed),
                Conv2d(p, f"encoder.stage{k}.conv", wk, wk, 3, seed=seed),
            ))
            cin = wk
        self.enc_context = Conv2d(p, "encoder.context", cin, cfg.channels, 3, seed=seed)
        # projections for stages at scales 2 .. s/2
        self.enc_skips = [
            Conv2d(p, f"encoder.skip{k}", widths[k - 1], SKIP_CHANNELS, 3, seed=seed)
            for k in range(1, cfg.stages)
        ]

        self.flow_net = None
        if cfg.ablation == "motion" and cfg.flow_provider == "tiny":
            self.flow_net = TinyFlowNet(p, cfg.flow_levels, cfg.flow_channels, seed=seed)

        c = cfg.channels
        if cfg.ablation == "baseline":
            self.head = Conv2d(p, "head.conv", c, cfg.hidden, 3, seed=seed)
        if cfg.ablation == "motion":
            self.corr1 = Conv2d(p, "cm.corr.conv1", 2 * c, CORR_CHANNELS, 3, seed=seed)
            self.corr2 = Conv2d(p, "cm.corr.conv2", CORR_CHANNELS, CORR_CHANNELS, 3, seed=seed)
            self.fenc1 = Conv2d(p, "cm.flow_encode.conv1", 2, FLOW_ENC_CHANNELS, 7, seed=seed)
            self.fenc2 = Conv2d(p, "cm.flow_encode.conv2", FLOW_ENC_CHANNELS, FLOW_ENC_CHANNELS, 7, seed=seed)
            self.motion = Conv2d(p, "cm.motion", CORR_CHANNELS + FLOW_ENC_CHANNELS, MOTION_CHANNELS, 3, seed=seed)
            gru_in = c + MOTION_CHANNELS + 2
        else:
            gru_in = c
        if cfg.ablation != "baseline":
            self.gru = SepConvGRU(p, "gru", cfg.hidden, gru_in, seed=seed)

        self.decoders = {}
        for head, out_ch in (("alpha", 1), ("foreground", 3)):
            stages = []
            cin = cfg.hidden
            for k in range(cfg.stages - 1, 0, -1):
                stages.append((
                    Conv2d(p, f"decoder_{head}.up{k}.conv1", cin + SKIP_CHANNELS, DECODER_CHANNELS, 3, seed=seed),
                    Conv2d(p, f"decoder_{head}.up{k}.conv2", DECODER_CHANNELS, DECODER_CHANNELS, 3, seed=seed),
                ))
                cin = DECODER_CHANNELS
            final = (
                Conv2d(p, f"decoder_{head}.out.conv1", cin + 3, DECODER_CHANNELS, 3, seed=seed),
                Conv2d(p, f"decoder_{head}.out.conv2", DECODER_CHANNELS, out_ch, 3, seed=seed),
            )
            self.decoders[head] = (stages, final)

    # -- pieces -----------------------------------------------------------

    def encode_frame(self, frame: Tensor) -> EncoderOutput:
        s = self.cfg.reduction
        _, c, h, w = frame.shape
        if c != 3:
            raise ShapeError(f"frames are RGB, got {c} channels")
        if h % s or w % s:
            raise ShapeError(f"frame {h}x{w} not divisible by reduction {s}")
        x = frame
        feats = []
        for down, conv in self.enc_stages:
            x = T.relu(conv(T.relu(down(x))))
            feats.append(x)
        context = T.relu(self.enc_context(x))
        skips = [T.relu(proj(feats[k])) for k, proj in enumerate(self.enc_skips)]
        return EncoderOutput(context, skips[::-1])

    def estimate_flow(self, frame_t: Tensor, frame_prev: Tensor, oracle: Tensor | None = None,
                      provider: str | None = None) -> Tensor:
        provider = provider or self.cfg.flow_provider
        if frame_t.shape != frame_prev.shape:
            raise ShapeError("flow needs two frames of the same shape")
        if provider == "oracle":
            if oracle is None:
                raise UsageError("oracle flow provider needs ground-truth flow")
            check_flow(oracle)
            return oracle
        if self.flow_net is None:
            raise UsageError("model was built without a tiny flow network")
        flow = self.flow_net(frame_t, frame_prev)
        check_flow(flow)
        return flow

    def _small_flow(self, flow: Tensor, hw: tuple[int, int]) -> Tensor:
        return T.bilinear_resize(flow, hw[0], hw[1], 1.0 / self.cfg.reduction)

    def cm_backwarp(self, prev: EncoderOutput, flow: Tensor) -> Tensor:
        ctx = prev.context
        return T.backwarp(ctx, self._small_flow(flow, ctx.shape[2:]))

    def cm_correlate(self, fea_t: Tensor, warped_prev: Tensor) -> Tensor:
        if fea_t.shape != warped_prev.shape:
            raise ShapeError("correlation inputs differ in shape")
        return self.corr2(T.relu(self.corr1(T.concat_channels([fea_t, warped_prev]))))

    def cm_encode_flow(self, flow: Tensor, target_hw: tuple[int, int]) -> tuple[Tensor, Tensor]:
        small = self._small_flow(flow, target_hw)
        return self.fenc2(T.relu(self.fenc1(small))), small

    def cm_fuse(self, fea_t: Tensor, corr: Tensor, flo_feat: Tensor, flow_small: Tensor) -> Tensor:
        m = T.relu(self.motion(T.concat_channels([corr, flo_feat])))
        return T.concat_channels([fea_t, m, flow_small])

    def decode(self, head: str, hidden: Tensor, skips: list[Tensor], frame: Tensor) -> Tensor:
        """Upsample ``hidden`` through the skip pyramid to frame resolution.

        The input frame serves as the full-resolution skip of the last stage.
        """
        stages, (out1, out2) = self.decoders[head]
        if len(skips) != len(stages):
            raise ShapeError(f"decoder expects {len(stages)} skips, got {len(skips)}")
        x = hidden
        for (c1, c2), skip in zip(stages, skips):
            _, _, h, w = x.shape
            if skip.shape[2:] != (2 * h, 2 * w):
                raise ShapeError(f"skip {skip.shape} does not match upsampled {2 * h}x{2 * w}")
            x = T.bilinear_resize(x, 2 * h, 2 * w)
            x = T.relu(c2(T.relu(c1(T.concat_channels([x, skip])))))
        _, _, h, w = x.shape
        if frame.shape[2:] != (2 * h, 2 * w):
            raise ShapeError("decoder did not reach frame resolution")
        x = T.bilinear_resize(x, 2 * h, 2 * w)
        y = out2(T.relu(out1(T.concat_channels([x, frame]))))
        return T.sigmoid(y) if head == "alpha" else y

    # -- recurrence -------------------------------------------------------

    def initial_hidden(self, enc: EncoderOutput) -> Tensor:
        n, _, h, w = enc.context.shape
        return T.zeros((n, self.cfg.hidden, h, w), self.precision)

    def _fuse(self, ctx: Tensor, prev_ctx: Tensor, flow: Tensor) -> Tensor:
        hw = ctx.shape[2:]
        warped = self.cm_backwarp(EncoderOutput(prev_ctx, []), flow)
        corr = self.cm_correlate(ctx, warped)
        flo_feat, small = self.cm_encode_flow(flow, hw)
        return self.cm_fuse(ctx, corr, flo_feat, small)

    def forward_step(self, state: StepState | None, frame: Tensor,
                     oracle_flow: Tensor | None = None) -> tuple[MattingOutput, StepState, Tensor | None]:
        """One recurrent step. ``state=None`` marks the first frame.

        Returns the outputs, the new state and the flow that was used (None
        for ablations without motion).
        """
        cfg = self.cfg
        enc = self.encode_frame(frame)
        if state is None:
            prev_enc, h_prev = enc, self.initial_hidden(enc)
        else:
            if state.prev_frame.shape != frame.shape:
                raise ShapeError("frame shape changed mid-sequence")
            prev_enc, h_prev = state.prev_context, state.hidden
        flow = None
        if cfg.ablation == "baseline":
            hidden = T.tanh(self.head(enc.context))
        elif cfg.ablation == "gru":
            hidden = gru_step(self.gru, h_prev, enc.context)
        else:
            if state is None:
                n, _, h, w = frame.shape
                flow = T.zeros((n, 2, h, w), self.precision)
            else:
                flow = self.estimate_flow(frame, state.prev_frame, oracle_flow)
            hidden = gru_step(self.gru, h_prev, self._fuse(enc.context, prev_enc.context, flow))
        out = MattingOutput(
            self.decode("alpha", hidden, enc.skips, frame),
            self.decode("foreground", hidden, enc.skips, frame),
        )
        return out, StepState(hidden, enc, frame), flow

    def rollout(self, frames: list[Tensor], flows: list[Tensor] | None = None) -> Rollout:
        """Run a whole sequence.

        Equivalent to chaining :meth:`forward_step`, but the encoder, the
        motion features and both decoders run once over all frames stacked
        on the batch axis; only the GRU recurrence is stepped frame by frame.
        ``flows[t]`` is the oracle backward flow of frame t (``flows[0]`` is
        ignored).
        """
        cfg = self.cfg
        nt = len(frames)
        if nt == 0:
            raise UsageError("rollout needs at least one frame")
        n = frames[0].shape[0]
        for f in frames:
            if f.shape != frames[0].shape:
                raise ShapeError("frame shape changed mid-sequence")
        xs = T.concat_batch(frames)
        enc = self.encode_frame(xs)

        def at(x: Tensor, t: int) -> Tensor:
            return T.slice_batch(x, t * n, (t + 1) * n)

        used_flows: list[Tensor | None] = [None] * nt
        if cfg.ablation == "baseline":
            hid_all = T.tanh(self.head(enc.context))
            hiddens = [at(hid_all, t) for t in range(nt)]
        else:
            if cfg.ablation == "gru":
                inputs = enc.context
            else:
                _, _, h, w = frames[0].shape
                zero = T.zeros((n, 2, h, w), self.precision)
                if nt > 1 and cfg.flow_provider == "tiny":
                    est = self.estimate_flow(T.concat_batch(frames[1:]), T.concat_batch(frames[:-1]))
                    later = [at(est, t) for t in range(nt - 1)]
                elif nt > 1:
                    if flows is None:
                        raise UsageError("oracle flow provider needs ground-truth flow")
                    later = [self.estimate_flow(frames[t], frames[t - 1], flows[t]) for t in range(1, nt)]
                else:
                    later = []
                used_flows = [zero] + later
                flow_all = T.concat_batch(used_flows)
                prev_ctx = T.concat_batch([at(enc.context, 0)] + [at(enc.context, t) for t in range(nt - 1)]) \
                    if nt > 1 else enc.context
                inputs = self._fuse(enc.context, prev_ctx, flow_all)
            hid = self.initial_hidden(EncoderOutput(at(enc.context, 0), []))
            hiddens = []
            for t in range(nt):
                hid = gru_step(self.gru, hid, at(inputs, t))
                hiddens.append(hid)
            hid_all = T.concat_batch(hiddens)
        alpha = self.decode("alpha", hid_all, enc.skips, xs)
        fg = self.decode("foreground", hid_all, enc.skips, xs)
        result = Rollout([])
        for t in range(nt):
            result.outputs.append(MattingOutput(at(alpha, t), at(fg, t)))
            step_enc = EncoderOutput(at(enc.context, t), [at(s_, t) for s_ in enc.skips])
            result.states.append(StepState(hiddens[t], step_enc, frames[t]))
        result.flows = used_flows
        return result
