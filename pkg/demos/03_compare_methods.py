"""FedAvg, FedProx, FedAMP and layer-wise fusion on the 2-cluster benchmark.

Run: python3 demos/03_compare_methods.py   (about 5 seconds)
"""
from pfedcfr import data, nn, runtime

ds = data.gen_synthetic(2, 100, 20, 8, seed=0, std=0.5)
shards = data.partition_heterogeneous(ds, data.PartitionConfig(8, 2, 1.0, 0))
spec = nn.ModelSpec.mlp([20, 64, 8])  # layer 1 extracts features, layer 2 decides

for method in runtime.METHODS:
    history = runtime.run_experiment(spec, shards, runtime.MethodConfig(method, rounds=30, seed=0))
    mean, std = runtime.final_accuracy(history)
    curve = " ".join(f"{m.acc_mean:.2f}" for m in history[::5])
    print(f"{method:8s} final {mean:.4f} +- {std:.4f}   every 5th round: {curve}")

# One shared model has to serve clients that see only 2 of 8 labels, so the
# global methods stall. Personalized layers let each client keep what fits its labels.
# Same thing from the shell:
#   pfedcfr compare demos/benchmark.json --methods fedavg,fedprox,fedamp,pfedcfr
