#==========================================================================
# Train a small unfolded network end to end.
#
# Eight phantoms, a 12-view problem, Q=4 unfolded iterations with B=4
# stochastic data-consistency layers. Training minimizes the summed
# squared error between unfolded outputs and the ground truths; the
# script prints the loss trace and the test-time SNR before and after.
#==========================================================================

import numpy as np

from sgdnet import (
    make_radon_model, make_phantoms, Dataset, PriorNet,
    UnfoldConfig, TrainConfig, train_unfolded, sgdnet_forward, snr_db,
)
from sgdnet.operators import apply, fbp_init

SIZE = 16
VIEWS = 12
M_TRAIN = 8

model = make_radon_model(SIZE, VIEWS)
truths = make_phantoms(SIZE, M_TRAIN, seed=11)
dataset = Dataset.from_truths(truths, model, snr_db=40.0, noise_seed=3,
                              init="fbp")

unfold = UnfoldConfig(q_steps=4, gamma=2e-3, minibatch=4, mode="stochastic",
                      seed=0)
net = PriorNet.init_random(seed=21, tau=1.0, weight_scale=0.3)

# held-out phantom from the same family
test_truth = make_phantoms(SIZE, M_TRAIN + 4, seed=11)[-1]
y_test = apply(model, test_truth)
x0_test = fbp_init(y_test, model)

before = sgdnet_forward(x0_test, y_test, model, net, unfold)
print(f"test SNR before training: {snr_db(before.final, test_truth):7.2f} dB")

cfg = TrainConfig(epochs=30, schedule={"kind": "constant", "eta": 1e-3},
                  optimizer="adam", seed=4)
ckpt, trace = train_unfolded(dataset, model, net, unfold, cfg)
net = ckpt.net

losses = [row["loss"] for row in trace.rows if row.get("loss") is not None]
print(f"loss first/last: {losses[0]:.4f} -> {losses[-1]:.4f}")

after = sgdnet_forward(x0_test, y_test, model, net, unfold)
print(f"test SNR after  training: {snr_db(after.final, test_truth):7.2f} dB")
print(f"learned tau: {net.tau:.3f}")
