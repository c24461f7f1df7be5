"""Desk-scale tuning aid: train the Tree/Additive model in epoch blocks and
print protocol metrics after each block. Development tool, not shipped API.

Usage: python scripts/desk_tune.py [block ...]   (default: 5 5 5)
"""
import sys
import time

import numpy as np

from flowcast.evaluation import EvalSettings, run_protocol, training_windows
from flowcast.flow import FlowConfig
from flowcast.model import init_model
from flowcast.scm import Family, Mechanism, SeriesBatch, draw_spec, simulate
from flowcast.training import TrainConfig, train


def main(blocks):
    spec = draw_spec(Family.TREE, Mechanism.ADDITIVE, seed=7)
    series = simulate(spec, 1, 2500, seed=1)
    windows = training_windows(series, 120, 90, train_frac=0.8)
    test_series = SeriesBatch(series.values[:, :, 2000:], 90,
                              series.start_times + 2000)
    print(f"train windows: {windows.batch_size}, roots={spec.roots}, "
          f"beta={spec.self_coeffs}")

    model = init_model(spec.dag, hidden_dim=32, width=64, depth=3, seed=0,
                       flow=FlowConfig(steps=16))
    done, opt = 0, None
    for block in blocks:
        cfg = TrainConfig(epochs=done + block, batch_size=128, seed=2,
                          learning_rate=1e-3)
        t1 = time.time()
        result = train(model, windows, cfg, start_epoch=done, opt=opt)
        opt = result.opt
        done += block
        t_train = time.time() - t1
        t2 = time.time()
        settings = EvalSettings(batch=32, realizations=20, runs=3,
                                intervention_offset=30, seed=3)
        res = run_protocol(model, spec, test_series, 120, 90, settings)
        losses = [v for _, _, v in result.curve]
        print(
            f"epoch {done:3d}: loss {np.mean(losses[-15:]):.3f} "
            f"obs_rmse {np.mean(res['observational'].rmse_runs):.3f} "
            f"int_rmse {np.mean(res['interventional'].rmse_runs):.3f} "
            f"cf_rmse {np.mean(res['counterfactual'].rmse_runs):.3f} "
            f"obs_mmd {np.mean(res['observational'].mmd_runs):.3f} "
            f"int_mmd {np.mean(res['interventional'].mmd_runs):.3f} "
            f"[train {t_train:.0f}s eval {time.time() - t2:.0f}s]"
        )


if __name__ == "__main__":
    main([int(x) for x in (sys.argv[1:] or ["5", "5", "5"])])
