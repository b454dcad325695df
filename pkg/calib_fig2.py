"""Figure-2 calibration: train baseline/mt/al on candidate toy presets
and probe speaker information (throwaway script).

Usage: python3 calib_fig2.py fork=mid train.lr_main=0.03 ...
"""
import sys
import time

from gradflip import analysis as an, config as cf, data as gd, model as gm, trainer as tr

overrides = {
    "gen.offset_scale": "0.5",
    "gen.noise_sigma": "0.25",
}
fork = "mid"
for arg in sys.argv[1:]:
    key, _, val = arg.partition("=")
    if key == "fork":
        fork = val
    else:
        overrides[key] = val
overrides["train.fork"] = fork

cfg = cf.resolve(overrides=overrides)
full = gd.generate(cf.gen_config(cfg))
main_ds, _ = gd.partition_semi(full)
train_ds, dev_ds, _ = gd.split(main_ds, 0.8, 0.1, cfg["seed"])

models = {}
for mode in ("baseline", "mt", "al"):
    t0 = time.perf_counter()
    c = dict(cfg)
    c["train.mode"] = mode
    mcfg = cf.model_config(c, train_ds.dim, len(train_ds.vocab), len(train_ds.speakers))
    m = gm.build_model(mcfg, c["seed"])
    try:
        res = tr.train(m, train_ds, dev_ds, cf.train_config(c))
    except tr.DivergenceError as e:
        print(f"{mode}: DIVERGED {e}", flush=True)
        continue
    models[mode] = m
    print(
        f"{mode}-{fork}: best_ler={res.best_dev_ler:.3f} final_ler={res.rows[-1].dev_ler:.3f} "
        f"dev_spk_acc={res.rows[-1].dev_speaker_acc:.3f} "
        f"({time.perf_counter()-t0:.0f}s)",
        flush=True,
    )

n = cfg["model.n_layers"]
layers_map = {lbl: gm.resolve_fork(n, lbl) for lbl in ("in", "mid", "out")}
probe_sets = {"baseline": list(layers_map), "mt": [fork], "al": [fork]}
for variant, labels in probe_sets.items():
    if variant not in models:
        continue
    sub = {lbl: layers_map[lbl] for lbl in labels}
    cells = an.figure2_report({variant: models[variant]}, sub, train_ds, probe_epochs=10, seed=cfg["seed"])
    for c in cells:
        if c.variant != "chance":
            print(f"probe {c.variant:9s} {c.layer_label:4s} acc={c.accuracy:.4f} (n={c.n_eval})", flush=True)
print(f"chance = {1.0/len(train_ds.speakers):.4f}", flush=True)
