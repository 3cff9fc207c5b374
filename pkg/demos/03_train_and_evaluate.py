"""
A short training run and its evaluation
=======================================

Train the small detector for a few steps on in-memory pairs, then score it
with the oracle matcher and 8-point RANSAC. Numbers from such a short run
are only a smoke check; see the acceptance suite for real comparisons.
"""

# %%
from kptrain.detector import TrainConfig, predict, train, v1_compat
from kptrain.evalbench import EvalConfig, evaluate_detector
from kptrain.sampler import SampleConfig
from kptrain.scenegen import SceneConfig, generate_scene, sample_pair

cfg = SceneConfig()
train_pairs = [sample_pair(generate_scene(cfg, s), 0.35, 0.9, seed=s) for s in range(14)]
test_pairs = [sample_pair(generate_scene(cfg, 10_000 + s), 0.35, 0.9, seed=s) for s in range(5)]

# %%
# v2 (train-time NMS, per-pair top-k, rotation/flip augmentation) against the
# baseline settings. Priors are shared between runs through one cache.
cache = {}
for name, tc in (("v2", TrainConfig(pairs_total=70, n_checkpoints=2)),
                 ("v1", v1_compat(TrainConfig(pairs_total=70, n_checkpoints=2)))):
    result = train(tc, train_pairs, prior_cache=cache)
    ce = [r["ce"] for r in result.log]
    print(f"{name}: {len(result.log)} steps, ce {ce[0]:.3f} -> {ce[-1]:.3f}")
    net = result.checkpoints[-1].network()
    rep = evaluate_detector(lambda v: predict(net, v.image), test_pairs, SampleConfig(budget=500), EvalConfig())
    print(f"  repeatability {rep.repeatability:.3f}  AUC@5/10/20 "
          + "/".join(f"{a:.3f}" for a in rep.auc.values()) + f"  mAA {rep.maa:.3f}")
