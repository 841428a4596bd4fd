"""End-to-end tour on a small synthetic phenology dataset.

Builds a rain-modulated GDD dataset, fits the static gradient-descent
calibration and a small DMC-MTL model, compares their test RMSE, checks
biological realism, adapts one season with a few observations and
attributes one predicted parameter to the inputs.  Runs in a few minutes.

    python3 demos/quickstart.py
"""

import numpy as np

from hybridcrop import adapt as ap
from hybridcrop import baselines as bl
from hybridcrop import data
from hybridcrop import evalbench as eb
from hybridcrop import gradtrain as gt
from hybridcrop import hybrid as hy
from hybridcrop import synthgen as sg
from hybridcrop import weatherdata as wd

SEED = 0
NET = dict(pre_dims=(16,), recur_dim=16, post_dims=(16,))


def main():
    ds = sg.build(sg.SynthConfig(model="gdd", n_cultivars=3, years=6, seed=SEED,
                                 modulation={"param": "tbasem", "feature": "rain", "amplitude": 2.0}))
    train, val, test = eb.make_splits(ds.seasons, SEED).apply(ds.seasons)
    stats = wd.fit_norm([s.weather for s in train])
    train, val, test = [data.with_norm(x, stats) for x in (train, val, test)]
    print(f"{len(train)} training, {len(val)} validation, {len(test)} test seasons")

    static = bl.fit_baseline("gd", "gdd", train, 3, SEED, gt.TrainConfig.preset("gd", epochs=100))
    dmc = bl.fit_dmc("dmc-mtl", "gdd", train, 3, SEED, gt.TrainConfig.preset("dmc-mtl", epochs=60,
                                                                             learning_rate=3e-3),
                     val=val, **NET)
    for name, p in (("static gd", static), ("dmc-mtl", dmc)):
        scores = eb.evaluate(p, test)
        print(f"{name:>10}: test RMSE {eb.mean_rmse(scores):.2f} days, "
              f"{sum(s.violations for s in scores)} realism violations")

    s = test[0]
    base = hy.dmc_rollout(dmc.model, s.weather, s.cultivar)
    een = ap.init_een(dmc.model.net.config, SEED)
    obs = np.full(len(s), np.nan)
    obs[::7][:10] = s.target.values[::7][:10]
    adapted = ap.adapt_rollout(dmc.model, een, s.weather, s.cultivar, obs)
    print("true onsets     ", s.target.onsets[1:4])
    print("base onsets     ", base.series.onsets[1:4])
    print("adapted (untrained EEN)", adapted.series.onsets[1:4])

    day, param = 60, 0
    ig = eb.integrated_gradients(dmc.model, s.weather, s.cultivar, (day, param), m=64)
    top = np.argsort(-np.abs(ig.sum(axis=0)))[:3]
    print(f"inputs driving tbasem on day {day}:", [s.weather.names[i] for i in top])


if __name__ == "__main__":
    main()
