#!/usr/bin/env python3
"""Analytic learnable-parameter census.

Recomputes the total parameter count of a configured model from the
layer shape algebra alone (closed-form sums, no model construction), so
it can cross-check the count the benchmark reports. Run with --config
to census a TOML run config, or --check to also build the model and
compare against the live parameter walk.
"""

import argparse
import json
import sys


def linear(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def layer_norm(dim):
    return 2 * dim


def mha(dim):
    # fused qkv projection + output projection, both biased
    return linear(dim, 3 * dim) + linear(dim, dim)


def swin_block(dim, mlp_ratio):
    hidden = int(dim * mlp_ratio)
    return (layer_norm(dim) + mha(dim)
            + layer_norm(dim) + linear(dim, hidden) + linear(hidden, dim))


def patch_merging(dim):
    # norm over the 4-way concat, then a bias-free reduction to 2*dim
    return layer_norm(4 * dim) + linear(4 * dim, 2 * dim, bias=False)


def cross_block(dim, mlp_ratio):
    hidden = int(dim * mlp_ratio)
    return mha(dim) + linear(dim, hidden) + linear(hidden, dim)


def patch_embed(c):
    # 4x4x3 patch flattening, biased linear, then a LayerNorm
    return linear(4 * 4 * 3, c) + layer_norm(c)


def backbone_params(c, stage_depths, mlp_ratio, fuse_stages):
    total = 0
    for path in ("image", "video"):
        total += patch_embed(c)
        for k in range(4):
            dim = c * (1 << k)
            total += stage_depths[k] * swin_block(dim, mlp_ratio)
            if k < 3:
                total += patch_merging(dim)
    for k in fuse_stages:
        total += cross_block(c * (1 << (k - 1)), mlp_ratio)
    return total


def decoder_params(c, hidden, layers, n, t, heads_unused=None):
    total = linear(8 * c, hidden)                     # memory projection
    total += n * t * hidden                           # learned queries
    per_layer = (layer_norm(hidden) + mha(hidden)     # self-attention
                 + layer_norm(hidden) + mha(hidden)   # cross-attention
                 + layer_norm(hidden)
                 + linear(hidden, 4 * hidden) + linear(4 * hidden, hidden))
    return total + layers * per_layer


def heads_params(c, hidden, mask_dim):
    total = linear(hidden, 2)                                   # class
    total += 2 * linear(hidden, hidden) + linear(hidden, 4)     # box MLP
    total += linear(8 * c, hidden)                              # mask keys
    total += linear((1 + 8 * c) + 4 * c, mask_dim)              # mix with f3
    total += linear(mask_dim + 2 * c, mask_dim)                 # mix with f2
    total += linear(mask_dim + 1 * c, mask_dim)                 # mix with f1
    total += linear(mask_dim, 1)
    return total


def census(cfg):
    c = cfg.backbone.C
    t = cfg.backbone.video_size[0]
    return {
        "backbone": backbone_params(c, cfg.backbone.stage_depths,
                                    cfg.backbone.mlp_ratio, cfg.backbone.fuse_stages),
        "decoder": decoder_params(c, cfg.decoder.hidden_dim, cfg.decoder.layers,
                                  cfg.decoder.n, t),
        "heads": heads_params(c, cfg.decoder.hidden_dim, cfg.mask_dim),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True, help="run config TOML")
    parser.add_argument("--check", action="store_true",
                        help="build the model and compare against the live count")
    args = parser.parse_args()

    from vois.config import load_config
    cfg = load_config(args.config)
    parts = census(cfg)
    report = dict(parts)
    report["total"] = sum(parts.values())

    if args.check:
        import numpy as np
        from vois.model import VOISModel, parameter_count
        model = VOISModel(cfg.backbone, cfg.decoder, np.random.default_rng(0),
                          mask_dim=cfg.mask_dim)
        report["live_total"] = parameter_count(model)
        report["match"] = report["live_total"] == report["total"]
    print(json.dumps(report, indent=2))
    if args.check and not report["match"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
