"""Convolutional networks: sync expert encoders, lip generator, quality discriminator.

All public forward methods take channels-last tensors ``(N, H, W, C)`` and
convert to torch's NCHW internally. Batch normalisation (optional, used by the
sync expert) only couples rows in training mode; in eval mode every output row
depends on its own input row only.
"""
from __future__ import annotations

import torch
from torch import nn


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, kernel_size=3, stride=1, padding=1, residual=False, slope=0.0, norm=False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size, stride, padding)
        self.norm = nn.BatchNorm2d(cout) if norm else nn.Identity()
        self.residual = residual
        self.slope = slope
        if residual and (cin != cout or stride != 1):
            raise ValueError("residual block needs cin == cout and stride 1")

    def forward(self, x):
        out = self.norm(self.conv(x))
        if self.residual:
            out = out + x
        return nn.functional.leaky_relu(out, self.slope) if self.slope else torch.relu(out)


class UpBlock(nn.Module):
    def __init__(self, cin, cout, kernel_size=3, stride=2, padding=1, output_padding=1, norm=False):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, kernel_size, stride, padding, output_padding)
        self.norm = nn.BatchNorm2d(cout) if norm else nn.Identity()

    def forward(self, x):
        return torch.relu(self.norm(self.conv(x)))


def _nhwc_to_nchw(x):
    return x.permute(0, 3, 1, 2)


class ConvEncoder(nn.Module):
    """Stem + stride-2 stages (optionally with a residual block each) + global pool."""

    def __init__(self, in_ch, widths, out_dim, residual=True, out_relu=True, norm=False):
        super().__init__()
        layers = [ConvBlock(in_ch, widths[0], 3, 1, 1, norm=norm)]
        prev = widths[0]
        for w in widths:
            layers.append(ConvBlock(prev, w, 3, 2, 1, norm=norm))
            if residual:
                layers.append(ConvBlock(w, w, 3, 1, 1, residual=True, norm=norm))
            prev = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, out_dim, 1)
        self.out_relu = out_relu

    def forward(self, x):
        h = self.body(x)
        h = self.head(h.mean(dim=(2, 3), keepdim=True)).flatten(1)
        return torch.relu(h) if self.out_relu else h


class SyncNet(nn.Module):
    """Face-window and audio-window encoders producing rectified embeddings."""

    def __init__(self, Tv, widths, audio_widths, embed_dim, residual=True, norm=True):
        super().__init__()
        self.face_encoder = ConvEncoder(3 * Tv, list(widths), embed_dim, residual, norm=norm)
        self.audio_encoder = ConvEncoder(1, list(audio_widths), embed_dim, residual, norm=norm)

    def encode_face(self, faces):
        """faces: (N, H/2, W, 3*Tv)."""
        return self.face_encoder(_nhwc_to_nchw(faces))

    def encode_audio(self, audio):
        """audio: (N, Ta, D)."""
        return self.audio_encoder(audio.unsqueeze(1))


class LipGenerator(nn.Module):
    """Identity encoder (reference + pose prior, 6 channels), speech encoder, U-Net style decoder."""

    N_DOWN = 4

    def __init__(self, H, W, base, audio_widths, bottleneck=None, residual=True, norm=False):
        super().__init__()
        widths = [base * 2 ** k for k in range(self.N_DOWN + 1)]
        bottleneck = bottleneck or widths[-1]
        self.id_stem = ConvBlock(6, widths[0], 3, 1, 1, norm=norm)
        self.id_down = nn.ModuleList()
        for k in range(self.N_DOWN):
            stage = [ConvBlock(widths[k], widths[k + 1], 3, 2, 1, norm=norm)]
            if residual:
                stage.append(ConvBlock(widths[k + 1], widths[k + 1], 3, 1, 1, residual=True, norm=norm))
            self.id_down.append(nn.Sequential(*stage))
        kh, kw = H // 2 ** self.N_DOWN, W // 2 ** self.N_DOWN
        self.id_bottleneck = ConvBlock(widths[-1], bottleneck, (kh, kw), 1, 0, norm=norm)
        self.audio_encoder = ConvEncoder(1, list(audio_widths), bottleneck, residual, norm=norm)

        self.dec_in = UpBlock(2 * bottleneck, widths[-1], (kh, kw), 1, 0, 0, norm=norm)
        self.dec_up = nn.ModuleList()
        for k in range(self.N_DOWN, 0, -1):
            stage = [UpBlock(2 * widths[k], widths[k - 1], norm=norm)]
            if residual:
                stage.append(ConvBlock(widths[k - 1], widths[k - 1], 3, 1, 1, residual=True, norm=norm))
            self.dec_up.append(nn.Sequential(*stage))
        self.dec_out = nn.Sequential(ConvBlock(2 * widths[0], widths[0], 3, 1, 1, norm=norm),
                                     nn.Conv2d(widths[0], 3, 1))

    def forward(self, reference, prior, audio):
        """reference, prior: (B, H, W, 3); audio: (B, Ta, D) -> (B, H, W, 3) in [0, 1]."""
        x = _nhwc_to_nchw(torch.cat([reference, prior], dim=-1))
        skips = [self.id_stem(x)]
        for stage in self.id_down:
            skips.append(stage(skips[-1]))
        face = self.id_bottleneck(skips[-1])
        speech = self.audio_encoder(audio.unsqueeze(1))[:, :, None, None]
        h = self.dec_in(torch.cat([speech, face], dim=1))
        for stage, skip in zip(self.dec_up, reversed(skips[1:])):
            h = stage(torch.cat([h, skip], dim=1))
        out = self.dec_out(torch.cat([h, skips[0]], dim=1))
        return torch.sigmoid(out).permute(0, 2, 3, 1)


class QualityDiscriminator(nn.Module):
    """Stack of conv + LeakyReLU blocks ending in one real/fake probability per image."""

    def __init__(self, widths, slope=0.2):
        super().__init__()
        layers = [ConvBlock(3, widths[0], 3, 1, 1, slope=slope)]
        prev = widths[0]
        for w in widths:
            layers.append(ConvBlock(prev, w, 3, 2, 1, slope=slope))
            prev = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, 1, 1)

    def logits(self, images):
        h = self.body(_nhwc_to_nchw(images))
        return self.head(h.mean(dim=(2, 3), keepdim=True)).flatten()

    def forward(self, images):
        return torch.sigmoid(self.logits(images))
