"""Generator and PatchGAN discriminator definitions plus checkpoint I/O.

Generators follow the residual translation architecture: a 7x7 ingress
convolution, two stride-2 downsampling convolutions, a stack of residual
blocks (each carrying a dropout layer between its two convolutions for
Monte Carlo inference), two fractionally-strided upsampling convolutions
and a sigmoid-bounded 7x7 egress. Discriminators classify local patches
real/fake through a stack of stride-2 convolutions ending in a sigmoid map.

Checkpoints are self-describing zip archives: a JSON manifest (configs,
version tag, training step, parameter order) plus one raw little-endian
float32 entry per parameter, validated shape-by-shape on load.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import BadConfig, ShapeError

CHECKPOINT_VERSION = 1
WEIGHT_INIT_STD = 0.02


@dataclass
class GeneratorConfig:
    in_channels: int = 1
    base_width: int = 64
    n_res_blocks: int = 9  # 9 for 256-px patches, 6 for smaller inputs
    dropout_rate: float = 0.5
    norm: str = "instance"

    def validate(self):
        if self.in_channels < 1 or self.base_width < 1:
            raise BadConfig(f"channel widths must be positive: {self}")
        if self.n_res_blocks < 1:
            raise BadConfig(f"need at least one residual block: {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise BadConfig(f"dropout rate must be in [0,1): {self}")
        if self.norm != "instance":
            raise BadConfig(f"unsupported feature normalization {self.norm!r}")


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    base_width: int = 64
    n_layers: int = 3

    def validate(self):
        if self.in_channels < 1 or self.base_width < 1:
            raise BadConfig(f"channel widths must be positive: {self}")
        if self.n_layers < 1:
            raise BadConfig(f"need at least one layer: {self}")


class MCDropout(nn.Module):
    """Dropout whose mask stream is controllable for Monte Carlo inference.

    Active in training mode as usual; in eval mode only when ``stochastic``
    is set. Masks are drawn from ``generator`` when one is attached, which
    makes both training and inference replayable from a seed.
    """

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.stochastic = False
        self.generator: torch.Generator | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.p == 0.0 or not (self.training or self.stochastic):
            return x
        noise = torch.rand(x.shape, generator=self.generator, dtype=x.dtype, device=x.device)
        mask = (noise >= self.p).to(x.dtype)
        return x * mask / (1.0 - self.p)

    def extra_repr(self) -> str:
        return f"p={self.p}"


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, dropout_rate: float):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            MCDropout(dropout_rate),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Generator(nn.Module):
    """Domain-translation generator preserving spatial size end to end."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.base_width
        layers: list[nn.Module] = [
            nn.Conv2d(cfg.in_channels, w, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(4 * w),
            nn.ReLU(inplace=True),
        ]
        layers += [ResidualBlock(4 * w, cfg.dropout_rate) for _ in range(cfg.n_res_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, cfg.in_channels, 7, padding=3, padding_mode="reflect"),
            nn.Sigmoid(),
        ]
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2], x.shape[-1]
        if h % 4 != 0 or w % 4 != 0:
            raise ShapeError(f"spatial dims must be divisible by 4, got {(h, w)}")
        return self.body(x)

    def dropout_modules(self) -> list[MCDropout]:
        return [m for m in self.modules() if isinstance(m, MCDropout)]


class Discriminator(nn.Module):
    """PatchGAN: per-patch real/fake probability map in (0,1)."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.base_width
        layers: list[nn.Module] = [
            nn.Conv2d(cfg.in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = w
        for i in range(1, cfg.n_layers):
            nxt = min(w * 2**i, w * 8)
            layers += [
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = nxt
        nxt = min(w * 2**cfg.n_layers, w * 8)
        layers += [
            nn.Conv2d(ch, nxt, 4, stride=1, padding=1),
            nn.InstanceNorm2d(nxt),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(nxt, 1, 4, stride=1, padding=1),
            nn.Sigmoid(),
        ]
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


@dataclass
class ModelBundle:
    """The two generators and two domain discriminators trained jointly."""

    g_l: Generator  # LR -> HR
    g_h: Generator  # HR -> LR
    d_l: Discriminator  # judges the LR domain
    d_h: Discriminator  # judges the HR domain

    def generators(self) -> list[nn.Module]:
        return [self.g_l, self.g_h]

    def discriminators(self) -> list[nn.Module]:
        return [self.d_l, self.d_h]

    def parts(self) -> dict[str, nn.Module]:
        return {"g_l": self.g_l, "g_h": self.g_h, "d_l": self.d_l, "d_h": self.d_h}

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for model in self.parts().values():
            model.to(dtype=dtype)
        return self


def init_weights(model: nn.Module, generator: torch.Generator | None = None):
    """Zero-mean Gaussian (std 0.02) kernels, zero biases."""
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, WEIGHT_INIT_STD, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def build_generator(cfg: GeneratorConfig, generator: torch.Generator | None = None) -> Generator:
    model = Generator(cfg)
    init_weights(model, generator)
    return model


def build_discriminator(
    cfg: DiscriminatorConfig, generator: torch.Generator | None = None
) -> Discriminator:
    model = Discriminator(cfg)
    init_weights(model, generator)
    return model


def build_bundle(
    gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: int = 0
) -> ModelBundle:
    """Build the four networks with per-part seeded initialization."""
    rngs = [torch.Generator().manual_seed(derive_seed(seed, tag)) for tag in range(4)]
    return ModelBundle(
        g_l=build_generator(gen_cfg, rngs[0]),
        g_h=build_generator(gen_cfg, rngs[1]),
        d_l=build_discriminator(disc_cfg, rngs[2]),
        d_h=build_discriminator(disc_cfg, rngs[3]),
    )


def derive_seed(seed: int, stream: int) -> int:
    """Stable, well-mixed 63-bit stream seed for (seed, stream)."""
    state = np.random.SeedSequence(entropy=[int(seed) & (2**64 - 1), int(stream)])
    return int(state.generate_state(1, dtype=np.uint64)[0] >> 1)


def forward(model: Generator, x: torch.Tensor, stochastic: bool = False,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """Run one inference pass, optionally with dropout masks resampled.

    With ``stochastic`` off the pass is deterministic; with it on, masks are
    drawn at the training-time rate from ``generator`` so repeated calls
    yield a replayable sequence of distinct outputs.
    """
    was_training = model.training
    model.eval()
    for m in model.dropout_modules():
        m.stochastic = stochastic
        m.generator = generator
    try:
        with torch.no_grad():
            out = model(x)
    finally:
        for m in model.dropout_modules():
            m.stochastic = False
            m.generator = None
        model.train(was_training)
    return out


def _config_dict(bundle: ModelBundle) -> dict:
    return {
        "generator": asdict(bundle.g_l.cfg),
        "discriminator": asdict(bundle.d_l.cfg),
    }


def save_checkpoint(bundle: ModelBundle, path: str | Path, step: int = 0,
                    extra: dict | None = None) -> Path:
    """Write a checkpoint archive; atomic via rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "v": CHECKPOINT_VERSION,
        "kind": "earsr-checkpoint",
        "step": int(step),
        "configs": _config_dict(bundle),
        "params": {},
    }
    if extra:
        manifest["extra"] = extra
    tmp = path.with_name(path.name + ".tmp")

    def store(zf: zipfile.ZipFile, name: str, blob: bytes):
        # Fixed entry timestamp keeps archives byte-identical across reruns.
        info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, blob)

    with zipfile.ZipFile(tmp, "w") as zf:
        for part, model in bundle.parts().items():
            entries = []
            for idx, (name, tensor) in enumerate(model.state_dict().items()):
                arr = tensor.detach().cpu().numpy().astype("<f4")
                entry = f"params/{part}/{idx:04d}.f32"
                store(zf, entry, arr.tobytes())
                entries.append({"name": name, "shape": list(arr.shape), "entry": entry})
            manifest["params"][part] = entries
        store(zf, "manifest.json", json.dumps(manifest, indent=2).encode())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float64) -> tuple[ModelBundle, dict]:
    """Rebuild a bundle from an archive, validating every parameter shape."""
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        gen_cfg = GeneratorConfig(**manifest["configs"]["generator"])
        disc_cfg = DiscriminatorConfig(**manifest["configs"]["discriminator"])
        bundle = ModelBundle(
            g_l=Generator(gen_cfg),
            g_h=Generator(gen_cfg),
            d_l=Discriminator(disc_cfg),
            d_h=Discriminator(disc_cfg),
        ).to(dtype)
        for part, model in bundle.parts().items():
            state = model.state_dict()
            recorded = manifest["params"][part]
            if len(recorded) != len(state):
                raise BadConfig(
                    f"{path}: part {part} has {len(recorded)} recorded params, model expects {len(state)}"
                )
            for meta, (name, tensor) in zip(recorded, state.items()):
                if meta["name"] != name:
                    raise BadConfig(f"{path}: parameter order mismatch at {name} vs {meta['name']}")
                if tuple(meta["shape"]) != tuple(tensor.shape):
                    raise BadConfig(
                        f"{path}: shape mismatch for {part}.{name}: "
                        f"archive {tuple(meta['shape'])} vs model {tuple(tensor.shape)}"
                    )
                blob = zf.read(meta["entry"])
                if len(blob) != 4 * tensor.numel():
                    raise BadConfig(
                        f"{path}: entry {meta['entry']} holds {len(blob)} bytes, "
                        f"expected {4 * tensor.numel()}"
                    )
                arr = np.frombuffer(blob, dtype="<f4").reshape(meta["shape"])
                with torch.no_grad():
                    tensor.copy_(torch.from_numpy(arr.copy()).to(tensor.dtype))
    return bundle, manifest
