"""Staged backbone with gradient-attention blocks on the last three stages.

Each instrumented stage gets a lightweight prediction head (1x1 reduce ->
global max pool -> 2-layer classifier); a fourth head classifies the
concatenation of the three pooled vectors. During a forward pass the stage
features are attention-enhanced (see attention.py) before feeding the next
stage; the target class for attention is the ground-truth label while
training and the concat head's argmax while evaluating. One parameter set
serves original and shuffled inputs alike.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .attention import ia_forward
from .config import ConfigError, RunConfig

STAGE_HEADS = ("s3", "s4", "s5")


@dataclass
class StageOutputs:
    """Per-head logits, pooled stage vectors, and optional attention maps."""

    logits_s3: torch.Tensor
    logits_s4: torch.Tensor
    logits_s5: torch.Tensor
    logits_concat: torch.Tensor
    pooled_s3: torch.Tensor
    pooled_s4: torch.Tensor
    pooled_s5: torch.Tensor
    attention_s3: torch.Tensor | None = None
    attention_s4: torch.Tensor | None = None
    attention_s5: torch.Tensor | None = None

    def logits(self, head: str) -> torch.Tensor:
        return getattr(self, f"logits_{head}")

    def attention(self, head: str) -> torch.Tensor | None:
        return getattr(self, f"attention_{head}")


def combined_prediction(out: StageOutputs, probs: bool = False) -> torch.Tensor:
    """Equal-weight sum of the four heads' scores; argmax is the prediction.

    With probs=True the heads are softmaxed before summing.
    """
    heads = [out.logits_s3, out.logits_s4, out.logits_s5, out.logits_concat]
    if probs:
        heads = [torch.softmax(h, dim=-1) for h in heads]
    return heads[0] + heads[1] + heads[2] + heads[3]


class StageHead(nn.Module):
    """1x1 reduce -> global max pool -> two-layer classifier.

    Deliberately BatchNorm-free so per-sample class-score gradients stay
    independent across a batch (the attention path differentiates through
    this head only).
    """

    def __init__(self, in_channels: int, width: int, num_classes: int):
        super().__init__()
        self.reduce = nn.Sequential(
            nn.Conv2d(in_channels, width, kernel_size=1), nn.ReLU(inplace=False)
        )
        self.classifier = nn.Sequential(
            nn.Linear(width, width), nn.ReLU(inplace=False), nn.Linear(width, num_classes)
        )

    def pool(self, features: torch.Tensor) -> torch.Tensor:
        return self.reduce(features).amax(dim=(-2, -1))

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pooled = self.pool(features)
        return pooled, self.classifier(pooled)

    def logits_from_features(self, features: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.pool(features))


def _conv_stage(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=False),
    )


class GuidedNet(nn.Module):
    """Multi-head classifier with per-stage gradient attention."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.backbone == "desk":
            ch = cfg.stage_channels
            if len(ch) != 5:
                raise ConfigError(f"desk backbone needs 5 stage channel counts, got {len(ch)}")
            stages = [_conv_stage(3, ch[0])] + [
                _conv_stage(ch[i], ch[i + 1]) for i in range(4)
            ]
            self.stages = nn.ModuleList(stages)
            self.instrumented = (2, 3, 4)  # paper-stage 3, 4, 5
            head_in = ch[2:5]
        else:  # resnet50
            from torchvision.models import resnet50

            net = resnet50(weights=None)
            prefix = nn.Sequential(
                net.conv1, net.bn1, net.relu, net.maxpool, net.layer1
            )
            self.stages = nn.ModuleList([prefix, net.layer2, net.layer3, net.layer4])
            self.instrumented = (1, 2, 3)
            head_in = [512, 1024, 2048]
        self.heads = nn.ModuleDict(
            {
                name: StageHead(c, cfg.head_width, cfg.num_classes)
                for name, c in zip(STAGE_HEADS, head_in)
            }
        )
        self.concat_head = nn.Sequential(
            nn.Linear(3 * cfg.head_width, cfg.head_width),
            nn.ReLU(inplace=False),
            nn.Linear(cfg.head_width, cfg.num_classes),
        )

    def _enhance(self, features, head, targets):
        """Attention pass for one stage; split out so tests can intercept it."""
        return ia_forward(
            features,
            head.logits_from_features,
            targets,
            rectify=self.cfg.attention_rectify,
            residual=self.cfg.attention_residual,
        )

    def forward(
        self,
        x: torch.Tensor,
        use_attention: bool | None = None,
        target_classes: torch.Tensor | None = None,
    ) -> StageOutputs:
        if use_attention is None:
            use_attention = self.cfg.use_attention
        if use_attention and target_classes is None:
            if self.training:
                raise ValueError("training with attention requires target labels")
            with torch.no_grad():
                prelim = self.forward(x, use_attention=False)
            target_classes = prelim.logits_concat.argmax(dim=1)

        pooled: dict[str, torch.Tensor] = {}
        logits: dict[str, torch.Tensor] = {}
        attn: dict[str, torch.Tensor | None] = {n: None for n in STAGE_HEADS}
        h = x
        head_iter = iter(STAGE_HEADS)
        for idx, stage in enumerate(self.stages):
            h = stage(h)
            if idx not in self.instrumented:
                continue
            name = next(head_iter)
            head = self.heads[name]
            if not use_attention:
                pooled[name], logits[name] = head(h)
                continue
            enhanced, a_map, _alpha = self._enhance(h, head, target_classes)
            attn[name] = a_map
            if self.cfg.enhancement_target == "heads":
                pooled[name], logits[name] = head(enhanced)
            else:
                pooled[name], logits[name] = head(h)
                h = enhanced
        concat = self.concat_head(
            torch.cat([pooled["s3"], pooled["s4"], pooled["s5"]], dim=1)
        )
        return StageOutputs(
            logits_s3=logits["s3"],
            logits_s4=logits["s4"],
            logits_s5=logits["s5"],
            logits_concat=concat,
            pooled_s3=pooled["s3"],
            pooled_s4=pooled["s4"],
            pooled_s5=pooled["s5"],
            attention_s3=attn["s3"],
            attention_s4=attn["s4"],
            attention_s5=attn["s5"],
        )


def weights_digest(model: nn.Module) -> str:
    """Content hash of the parameter tensors, for artifact provenance."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    path: str | Path,
    model: GuidedNet,
    cfg: RunConfig,
    epoch: int,
    history: list[dict],
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    """Binary weights at `path` plus a JSON sidecar at `path + '.json'`."""
    path = Path(path)
    payload = {"model": model.state_dict()}
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    torch.save(payload, path)
    sidecar = {
        "config": cfg.to_dict(),
        "epoch": epoch,
        "seed": cfg.seed,
        "history": history,
        "weights_sha256": weights_digest(model),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> tuple[GuidedNet, dict]:
    """Rebuild the model from a checkpoint and return it with its sidecar."""
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.is_file() or not sidecar_path.is_file():
        raise ConfigError(f"checkpoint {path} or its JSON sidecar is missing")
    meta = json.loads(sidecar_path.read_text())
    cfg = RunConfig.from_dict(meta["config"])
    model = GuidedNet(cfg)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, meta
