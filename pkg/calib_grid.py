"""Calibration grid for the toy preset (throwaway script)."""
import dataclasses
import math
import sys
import time

import numpy as np

from gradflip import config as cf, data as gd, model as gm, trainer as tr, tensor as tz, layers


def make_scaled(scale):
    def f(rng, fan_in, kernel_width, shape):
        bound = scale / math.sqrt(fan_in * kernel_width)
        return rng.uniform(-bound, bound, shape)
    return f


def run(scale, lr, offset_scale, noise, epochs=22):
    layers._init_uniform = make_scaled(scale)
    cfg = cf.resolve(overrides={
        "gen.offset_scale": str(offset_scale),
        "gen.noise_sigma": str(noise),
        "train.lr_main": str(lr),
    })
    full = gd.generate(cf.gen_config(cfg))
    main_ds, _ = gd.partition_semi(full)
    train_ds, dev_ds, _ = gd.split(main_ds, 0.8, 0.1, cfg["seed"])
    mcfg = cf.model_config(cfg, train_ds.dim, len(train_ds.vocab), len(train_ds.speakers))
    m = gm.build_model(mcfg, cfg["seed"])
    tcfg = dataclasses.replace(cf.train_config(cfg), epochs_a=epochs, epochs_b=0, epochs_c=0)
    t0 = time.perf_counter()
    try:
        res = tr.train(m, train_ds, dev_ds, tcfg)
        lers = [r.dev_ler for r in res.rows]
        u = dev_ds.utterances[0]
        with tz.no_grad():
            em = gm.forward_acoustic(m, u.features, "eval").data
        tstd = float(em.std(axis=0).mean())
        print(
            f"scale={scale:.2f} lr={lr} off={offset_scale} noise={noise}: "
            f"best_ler={min(lers):.3f} final_ler={lers[-1]:.3f} "
            f"ler5={lers[4]:.3f} ler12={lers[11]:.3f} em_tstd={tstd:.3f} "
            f"({time.perf_counter()-t0:.0f}s)",
            flush=True,
        )
    except tr.DivergenceError as e:
        print(f"scale={scale:.2f} lr={lr} off={offset_scale} noise={noise}: DIVERGED {e}", flush=True)


if __name__ == "__main__":
    for scale in (math.sqrt(12.0), math.sqrt(6.0)):
        for lr in (0.01, 0.03, 0.1):
            run(scale, lr, 0.5, 0.25)
