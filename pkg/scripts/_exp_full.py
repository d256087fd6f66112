import sys, time
import numpy as np
import sndmseg as S

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 40
n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 200
lr = float(sys.argv[4]) if len(sys.argv) > 4 else 1e-3

gen = S.GenConfig()
base = seed << 20
train_set = S.make_pairs(base, gen, n_train)
val_set = S.make_pairs(base + n_train, gen, 40)
test_set = S.make_pairs(base + n_train + 40, gen, 48)

net = S.NetConfig()
tcfg = S.TrainConfig(max_epochs=epochs, seed=seed, lr=lr)
t0 = time.perf_counter()
res = S.train(train_set, val_set, net, tcfg)
t1 = time.perf_counter()
rep = S.evaluate(res.params, net, test_set)
m = rep.mean()
print(f"seed={seed} epochs={epochs} pairs={n_train} lr={lr}: train {t1-t0:.0f}s "
      f"best_val={res.best_val_loss:.4f}@{res.best_epoch} "
      f"jaccard={m['jaccard']:.4f} precision={m['precision']:.4f} pixacc={m['pixel_accuracy']:.4f}")
hist = res.history
for h in hist[::8] + [hist[-1]]:
    print(f"  ep {h.epoch:3d}: train={h.train_loss:.4f} val={h.val_loss:.4f} lr={h.lr:.2e} ({h.wall_time:.1f}s)")
