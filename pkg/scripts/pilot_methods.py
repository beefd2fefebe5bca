"""One-seed pilot of the 3-task suite across methods; prints R matrices and COV."""
import copy
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from cladapt.decoding import Decoder, evaluate_corpus_wer
from cladapt.metrics import ResultMatrix, avg, bwt, cov
from cladapt.model import Model, ModelConfig
from cladapt.taskgen import generate_task, interference_suite
from cladapt.training import (
    ParameterStore, TrainPolicy, train_a_cft, train_a_freeze, train_fine_tune,
    train_initial, train_separate,
)

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 0
EPOCHS_INITIAL = int(sys.argv[2]) if len(sys.argv) > 2 else 8
EPOCHS_ADAPT = int(sys.argv[3]) if len(sys.argv) > 3 else 6
EPOCHS_STAGE2 = int(sys.argv[4]) if len(sys.argv) > 4 else 4

cfg = ModelConfig(vocab_size=34, feature_dim=16, feedforward_dim=128)
specs = interference_suite(3)
datasets = [generate_task(s) for s in specs]


def run(method):
    t0 = time.perf_counter()
    use_adapters = method in ("adapter_freeze", "adapter_cautious")
    policy = TrainPolicy(method=method, lr_initial=3e-3, batch_size=32, seed=SEED,
                         epochs_initial=EPOCHS_INITIAL, epochs_adapt=EPOCHS_ADAPT,
                         epochs_stage2=EPOCHS_STAGE2,
                         weight_decay_exponent=-5.0 if use_adapters else None)
    store = ParameterStore(Model(cfg, seed=SEED), use_adapters, adapter_dim=32)
    matrix = ResultMatrix(num_tasks=3)
    snapshots = {}
    for t, ds in enumerate(datasets, start=1):
        if t == 1:
            train_initial(ds, store, policy)
        elif method == "adapter_freeze":
            train_a_freeze(ds, store, policy)
        elif method == "adapter_cautious":
            train_a_cft(ds, store, policy)
        elif method == "fine_tune":
            train_fine_tune(ds, store, policy)
        elif method == "sep_model":
            train_separate(ds, store, policy, scope="full")
        if method == "sep_model":
            snapshots[t] = store.model.clone()
        for j in range(1, t + 1):
            if method == "sep_model":
                dec = Decoder(snapshots[j], beam_width=4)
                wer = evaluate_corpus_wer(dec, datasets[j - 1].test)
            else:
                dec = Decoder(store.model, beam_width=4)
                bank = store.registry.get(j) if use_adapters else None
                wer = evaluate_corpus_wer(dec, datasets[j - 1].test, bank)
            matrix.set(t, j, wer)
    print(f"{method}: {time.perf_counter()-t0:.0f}s")
    for i in range(1, 4):
        print("   ", [round(matrix.get(i, j), 2) for j in range(1, i + 1)])
    return matrix


results = {m: run(m) for m in ("fine_tune", "sep_model", "adapter_freeze",
                               "adapter_cautious")}
a_ft, a_sep = avg(results["fine_tune"]), avg(results["sep_model"])
print(f"AVG ft={a_ft:.2f} sep={a_sep:.2f}")
for m, r in results.items():
    print(f"{m}: AVG={avg(r):.2f} BWT={bwt(r):.2f} COV={cov(avg(r), a_ft, a_sep):.1f}%")
