"""The trainable few-shot segmentation model.

A frozen backbone feeds two trainable paths: a self-reasoning head that
predicts a coarse support mask from the last block, and a 1x1 reduction of
the middle blocks whose output is pooled into proxies/prototypes and
compared against the query. The decoders consume the comparison grids plus
cosine activation maps.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from dcp.config import GUIDANCE_SHORT, ModelConfig
from dcp.errors import CheckpointError, ValidationError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

REGION_SHORT = ("alpha", "beta", "gamma", "delta")


def preprocess(image, size=None):
    """uint8 ``H x W x 3`` image -> normalised float ``3 x H x W`` tensor."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got {arr.shape}")
    t = torch.from_numpy(np.array(arr, copy=True)).permute(2, 0, 1).float() / 255.0
    if size is not None and tuple(t.shape[1:]) != (size, size):
        t = F.interpolate(t[None], size=(size, size), mode="bilinear", align_corners=True)[0]
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (t - mean) / std


# ---------------------------------------------------------------- backbones


def _conv(cin, cout, stride=1, dilation=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation)


class ToyBackbone(nn.Module):
    """Three strided conv blocks; 64x64 input -> 8x8 final grid."""

    widths = (8, 16, 16)

    def __init__(self):
        super().__init__()
        w = self.widths
        self.blocks = nn.ModuleList([
            nn.Sequential(_conv(3, w[0], 2), nn.ReLU()),
            nn.Sequential(_conv(w[0], w[1], 2), nn.ReLU()),
            nn.Sequential(_conv(w[1], w[2], 2), nn.ReLU()),
        ])

    def forward(self, x):
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        return out


class SmallBackbone(nn.Module):
    """Four single-conv blocks at output stride 4; the last two keep resolution."""

    widths = (32, 64, 96, 128)

    def __init__(self):
        super().__init__()
        w = self.widths
        self.blocks = nn.ModuleList([
            nn.Sequential(_conv(3, w[0], 2), nn.ReLU()),
            nn.Sequential(_conv(w[0], w[1], 2), nn.ReLU()),
            nn.Sequential(_conv(w[1], w[2]), nn.ReLU()),
            nn.Sequential(_conv(w[2], w[3]), nn.ReLU()),
        ])

    def forward(self, x):
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        return out


class ResNetBackbone(nn.Module):
    """Dilated ResNet-50 (output stride 8), block b = torchvision ``layer{b}``.

    Weight files use torchvision's state-dict names (``conv1.weight``,
    ``layer1.0.conv1.weight``, ...); the classifier ``fc.*`` entries are ignored.
    """

    widths = (256, 512, 1024, 2048)

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None, replace_stride_with_dilation=[False, True, True])
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def forward(self, x):
        x = self.layer1(self.stem(x))
        out = [x]
        for layer in (self.layer2, self.layer3, self.layer4):
            x = layer(x)
            out.append(x)
        return out

    def load_torchvision_weights(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "state_dict" in state:
            state = state["state_dict"]
        mapped = {}
        for name, value in state.items():
            name = name.removeprefix("module.")
            if name.startswith("fc."):
                continue
            for src, dst in (("conv1.", "stem.0."), ("bn1.", "stem.1.")):
                if name.startswith(src):
                    name = dst + name[len(src):]
            mapped[name] = value
        missing, unexpected = self.load_state_dict(mapped, strict=False)
        if missing or unexpected:
            raise CheckpointError(f"backbone weights do not match: missing={missing[:5]} unexpected={unexpected[:5]}")


def build_backbone(config):
    if config.backbone == "toy":
        net = ToyBackbone()
    elif config.backbone == "reference_small":
        net = SmallBackbone()
    else:
        net = ResNetBackbone()
    gen = torch.Generator().manual_seed(config.backbone_seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
    if config.backbone == "reference_large" and config.backbone_weights:
        net.load_torchvision_weights(config.backbone_weights)
    return net


# ---------------------------------------------------------------- heads


class SelfReasoningHead(nn.Module):
    """1x1 projection, three residual 3x3 convs of ``channels`` filters, 2-way classifier."""

    def __init__(self, in_channels, channels):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, channels, 1)
        self.convs = nn.ModuleList([nn.Conv2d(channels, channels, 3, padding=1) for _ in range(3)])
        self.cls = nn.Conv2d(channels, 2, 1)

    def forward(self, x):
        x = F.relu(self.proj(x))
        for conv in self.convs:
            x = x + F.relu(conv(x))
        return self.cls(x)


class ASPP(nn.Module):
    def __init__(self, channels, rates):
        super().__init__()
        self.branches = nn.ModuleList(
            [nn.Conv2d(channels, channels, 1)]
            + [nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in rates]
        )
        self.image_pool = nn.Conv2d(channels, channels, 1)
        self.merge = nn.Conv2d(channels * (len(rates) + 2), channels, 1)

    def forward(self, x):
        outs = [F.relu(b(x)) for b in self.branches]
        pooled = F.relu(self.image_pool(F.adaptive_avg_pool2d(x, 1)))
        outs.append(pooled.expand(-1, -1, x.shape[2], x.shape[3]))
        return F.relu(self.merge(torch.cat(outs, dim=1)))


class Decoder(nn.Module):
    """Input projection, ASPP, residual 3x3 pair and a small classifier."""

    def __init__(self, in_channels, channels, out_channels, rates):
        super().__init__()
        self.inp = nn.Conv2d(in_channels, channels, 1)
        self.aspp = ASPP(channels, rates)
        self.res = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
        )
        self.cls = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, out_channels, 1),
        )

    def forward(self, x):
        x = F.relu(self.inp(x))
        x = self.aspp(x)
        x = x + self.res(x)
        return self.cls(x)


# ---------------------------------------------------------------- differentiable ops


def masked_pool(features, mask):
    """features ``N x C x h x w``, mask ``N x h x w`` -> (``N x C`` vectors, ``N`` valid flags)."""
    area = mask.sum(dim=(1, 2))
    valid = area > 0
    summed = torch.einsum("nchw,nhw->nc", features, mask)
    vec = summed / area.clamp_min(1.0)[:, None]
    return torch.where(valid[:, None], vec, torch.zeros_like(vec)), valid


def cosine_map(features, vec, valid):
    """features ``B x C x h x w``, vec ``B x C`` -> ``B x h x w`` cosine maps; 0 where undefined."""
    dot = torch.einsum("bchw,bc->bhw", features, vec)
    fsq = (features * features).sum(dim=1)
    vsq = (vec * vec).sum(dim=1)
    ok = (fsq > 0) & (vsq > 0)[:, None, None] & valid[:, None, None]
    tiny = torch.finfo(features.dtype).tiny
    denom = torch.sqrt(fsq.clamp_min(tiny)) * torch.sqrt(vsq.clamp_min(tiny))[:, None, None]
    return torch.where(ok, dot / denom, torch.zeros_like(dot))


def tile(vec, h, w):
    return vec[:, :, None, None].expand(-1, -1, h, w)


def hard_mask(logits):
    """Argmax over the two channels with ties resolved to background."""
    return (logits[:, 1] > logits[:, 0]).to(logits.dtype)


def divide_regions(pred, gt):
    alpha = pred * gt
    gamma = (1 - pred) * (1 - gt)
    return {"alpha": alpha, "beta": gt - alpha, "gamma": gamma, "delta": 1 - gt - gamma}


def resize_to(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=True)


# ---------------------------------------------------------------- model


@dataclass
class BackboneOutputs:
    blocks: list
    pool_source: torch.Tensor


@dataclass
class EpisodeOutput:
    support_aux_logits: torch.Tensor  # B x K x 2 x h x w
    query_aux_logits: torch.Tensor  # B x 2 x h x w
    logits: torch.Tensor  # B x 2 x h x w
    logits_full: torch.Tensor  # B x 2 x H x W
    mask: torch.Tensor  # B x H x W, int64
    details: Optional[dict] = field(default=None, repr=False)


class DCPModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = build_backbone(config)
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.eval()

        widths = self.backbone.widths
        c = config.channels
        if config.pool_source == "mid":
            self._pool_blocks = (len(widths) - 3, len(widths) - 2)
        else:
            self._pool_blocks = (len(widths) - 1,)
        self.reduce = nn.Conv2d(sum(widths[i] for i in self._pool_blocks), c, 1)
        self.sr_head = SelfReasoningHead(widths[-1], c)
        self.sr_head_query = None if config.share_self_reasoning else SelfReasoningHead(widths[-1], c)

        rates = config.aspp_rates
        if config.fusion_strategy == "tile_concat":
            self.decoder = Decoder(7 * c, c, 2, rates)
        elif config.use_pds:
            self.decoder_fg = Decoder(2 * c + 3, c, 1, rates)
            self.decoder_bg = Decoder(2 * c + 3, c, 1, rates)
        else:
            self.decoder = Decoder(2 * c + 6, c, 2, rates)

    def train(self, mode=True):
        super().train(mode)
        self.backbone.eval()
        return self

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def count_params(self):
        return sum(p.numel() for _, p in self.trainable_parameters())

    # -- feature extraction

    def extract_features(self, images):
        """Backbone blocks (no gradient) plus the trainable pooled-feature grid."""
        size = self.config.image_size
        if images.ndim != 4 or tuple(images.shape[1:]) != (3, size, size):
            raise ValidationError(f"expected N x 3 x {size} x {size} images, got {tuple(images.shape)}")
        with torch.no_grad():
            blocks = self.backbone(images)
        h = min(b.shape[2] for b in blocks)
        w = min(b.shape[3] for b in blocks)
        blocks = [resize_to(b, (h, w)) for b in blocks]
        src = torch.cat([blocks[i] for i in self._pool_blocks], dim=1)
        return BackboneOutputs(blocks, F.relu(self.reduce(src)))

    def self_reasoning(self, block_last, query=False):
        head = self.sr_head_query if (query and self.sr_head_query is not None) else self.sr_head
        logits = head(block_last)
        return logits, hard_mask(logits)

    # -- episode forward

    def forward(self, support_images, support_masks, query_images, details=False):
        """Batched forward pass.

        support_images ``B x K x 3 x S x S``, support_masks ``B x K x S x S`` (0/1),
        query_images ``B x 3 x S x S``.
        """
        cfg = self.config
        if support_images.ndim != 5 or support_masks.ndim != 4 or query_images.ndim != 4:
            raise ValidationError("expected B x K x 3 x S x S supports, B x K x S x S masks, B x 3 x S x S queries")
        b, k = support_images.shape[:2]
        if k < 1:
            raise ValidationError("need at least one support shot")
        s_out = self.extract_features(support_images.reshape(b * k, *support_images.shape[2:]))
        q_out = self.extract_features(query_images)
        s_feat, q_feat = s_out.pool_source, q_out.pool_source
        h, w = s_feat.shape[2:]

        s_aux, s_pred = self.self_reasoning(s_out.blocks[-1])
        q_aux, _ = self.self_reasoning(q_out.blocks[-1], query=True)

        gt = F.interpolate(support_masks.reshape(b * k, 1, *support_masks.shape[2:]).to(s_feat.dtype),
                           size=(h, w), mode="nearest")[:, 0]
        region_masks = divide_regions(s_pred.detach(), gt)
        region_masks["f"] = gt
        region_masks["b"] = 1 - gt

        vectors, valid = {}, {}
        for kind in GUIDANCE_SHORT:
            vec, ok = masked_pool(s_feat, region_masks[kind])
            vec, ok = vec.view(b, k, -1), ok.view(b, k)
            # average each kind over the shots where it exists
            count = ok.sum(dim=1)
            summed = (vec * ok[..., None].to(vec.dtype)).sum(dim=1)
            vec = summed / count.clamp_min(1)[:, None].to(vec.dtype)
            ok = count > 0
            if not cfg.guidance_enabled(kind):
                ok = torch.zeros_like(ok)
            vectors[kind] = torch.where(ok[:, None], vec, torch.zeros_like(vec))
            valid[kind] = ok

        if cfg.fusion_strategy == "tile_concat":
            x = torch.cat([q_feat] + [tile(vectors[kd], h, w) for kd in GUIDANCE_SHORT], dim=1)
            logits = self.decoder(x)
            maps = {}
        else:
            maps = {kd: cosine_map(q_feat, vectors[kd], valid[kd]) for kd in GUIDANCE_SHORT}
            tmp_fg = torch.cat([q_feat, tile(vectors["f"], h, w)], dim=1)
            if cfg.use_pds:
                tmp_bg = torch.cat([q_feat, tile(vectors["b"], h, w)], dim=1)
                fg_in = torch.cat([tmp_fg] + [maps[kd][:, None] for kd in ("f", "alpha", "beta")], dim=1)
                bg_in = torch.cat([tmp_bg] + [maps[kd][:, None] for kd in ("b", "gamma", "delta")], dim=1)
                logits = torch.cat([self.decoder_bg(bg_in), self.decoder_fg(fg_in)], dim=1)
            else:
                x = torch.cat([tmp_fg] + [maps[kd][:, None] for kd in GUIDANCE_SHORT], dim=1)
                logits = self.decoder(x)

        logits_full = resize_to(logits, tuple(query_images.shape[2:]))
        out = EpisodeOutput(
            support_aux_logits=s_aux.view(b, k, 2, h, w),
            query_aux_logits=q_aux,
            logits=logits,
            logits_full=logits_full,
            mask=hard_mask(logits_full).long(),
        )
        if details:
            out.details = {
                "support_pred": s_pred.view(b, k, h, w),
                "support_gt": gt.view(b, k, h, w),
                "regions": {kd: region_masks[kd].view(b, k, h, w) for kd in REGION_SHORT},
                "vectors": vectors,
                "valid": valid,
                "maps": maps,
                "query_features": q_feat,
                "support_features": s_feat.view(b, k, *s_feat.shape[1:]),
            }
        return out


def build_model(config, seed=0):
    """Construct a model; trainable weights are drawn from ``seed``."""
    torch.manual_seed(seed)
    return DCPModel(config)


def count_params(config):
    return DCPModel(config).count_params()


def episode_tensors(episodes, image_size, dtype=torch.float32):
    """Stack a list of episodes with equal shot counts into model inputs."""
    ks = {len(ep.support) for ep in episodes}
    if len(ks) != 1:
        raise ValidationError("episodes in one batch must share the shot count")
    s_img = torch.stack([torch.stack([preprocess(img, image_size) for img, _ in ep.support]) for ep in episodes])
    s_msk = torch.stack([torch.stack([_mask_tensor(m, image_size) for _, m in ep.support]) for ep in episodes])
    q_img = torch.stack([preprocess(ep.query_image, image_size) for ep in episodes])
    return s_img.to(dtype), s_msk.to(dtype), q_img.to(dtype)


def _mask_tensor(mask, size):
    t = torch.from_numpy(np.asarray(mask, dtype=np.float32))
    if tuple(t.shape) != (size, size):
        t = F.interpolate(t[None, None], size=(size, size), mode="nearest")[0, 0]
    return t


def forward_episode(model, episode, details=False):
    """Run one episode through ``model`` (inference mode, no gradients)."""
    inputs = episode_tensors([episode], model.config.image_size, next(model.parameters()).dtype)
    with torch.no_grad():
        return model(*inputs, details=details)
