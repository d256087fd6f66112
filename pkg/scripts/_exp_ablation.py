import sys, time, json
import sndmseg as S
from sndmseg.train import ablation, AblationConfig

runs = int(sys.argv[1]) if len(sys.argv) > 1 else 2
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 18
n_train = int(sys.argv[4]) if len(sys.argv) > 4 else 96

cfg = AblationConfig(n_train=n_train, epochs=epochs)
t0 = time.perf_counter()
table = ablation(runs, seed, cfg)
print(f"runs={runs} seed={seed} epochs={epochs} train={n_train}: {time.perf_counter()-t0:.0f}s")
print(json.dumps(table, indent=2))
