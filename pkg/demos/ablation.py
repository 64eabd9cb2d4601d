"""Where does cross-modal forensic knowledge come from?

Strong MAF (isolated perceptors) with the full detector, with random-projection
perceptors, and with a linear head trained on a single modality.
"""

from mafbench import protocols as pr
from mafbench.synthworld import WorldConfig, generate_world

world = generate_world(WorldConfig())
for mode in pr.ABLATION_MODES:
    res = pr.run_ablation(world, mode, seeds=2)
    print(f"{mode:16s} mean AUC {res.mean:.3f}  std {res.std:.3f}")
