"""Seeded random networks and shared-channel plans for property tests and experiments."""
import random
from dataclasses import replace

from hbmflow.hbm import HbmConfig
from hbmflow.network import LayerKind, LayerSpec, NetworkModel
from hbmflow.planner import Placement, plan_from_offload_set


def random_chain(rng: random.Random, n_layers: int, size: int = 8, max_c: int = 64,
                 max_p: int = 6) -> NetworkModel:
    """A straight pipeline with random kernel shapes and parallelism on a small image."""
    layers = []
    c_in, hw = rng.choice([1, 3, 8]), size
    for i in range(n_layers):
        k = rng.choice([1, 3, 3, 5])
        c_out = rng.randint(1, max_c)
        stride = 2 if (hw >= 4 and rng.random() < 0.2) else 1
        out = -(-hw // stride)
        p_i = rng.randint(1, min(c_in, max_p))
        p_o = rng.randint(1, min(c_out, max(1, max_p // p_i)))
        kind = LayerKind.POINTWISE if k == 1 else LayerKind.STANDARD
        layers.append(LayerSpec(i, kind, k, k, c_in, c_out, stride, hw, hw, out, out, p_i, p_o))
        c_in, hw = c_out, out
    edges = [(i + 1,) for i in range(n_layers - 1)] + [()]
    return NetworkModel(f"rand{n_layers}", layers, edges)


def random_shared_setup(seed: int, max_layers: int = 8, max_pcs: int = 4, bl: int = 8):
    """Random small net whose streamed layers share pseudo-channels.

    Offloaded layers use one or two chains and prefer a channel that already
    has a consumer, so every configuration has at least one shared channel.
    """
    rng = random.Random(seed)
    while True:
        n_pcs = rng.randint(1, max_pcs)
        hbm = HbmConfig(usable_pcs=tuple(range(n_pcs)))
        net = random_chain(rng, rng.randint(2, max_layers), size=rng.choice([4, 6, 8]),
                           max_c=48, max_p=2)
        room = {pc: 3 for pc in range(n_pcs)}
        placements, off = [], []
        for layer in net.layers:
            p = layer.parallelism
            fits = [pc for pc in room if room[pc] >= p]
            busy = [pc for pc in fits if room[pc] < 3]
            if fits and rng.random() < 0.8:
                pc = rng.choice(busy if busy and rng.random() < 0.7 else fits)
                room[pc] -= p
                off.append(layer.id)
                placements.append(Placement(layer.id, False, ((pc, p),)))
            else:
                placements.append(Placement(layer.id, True))
        users = [pc for p in placements for pc in p.pcs]
        if len(users) > len(set(users)):
            break
    plan = plan_from_offload_set(net, off, hbm, bl, policy="random")
    return net, replace(plan, placements=tuple(placements)), hbm
