import numpy as np
import pytest
import torch

from config.config import Config, DataConfig, ExperimentConfig, PoseNetConfig, PriorConfig, AdaptConfig
from models.pose_net import PoseNetwork
from skeleton.skeleton import SkeletonSpec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow acceptance test; use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# ---------- Skeletons ----------

@pytest.fixture(scope="session")
def skel() -> SkeletonSpec:
    """Shipped 14-joint figure skeleton."""
    return SkeletonSpec.load(Config.SKELETON_PATH)


@pytest.fixture(scope="session")
def skel13(skel) -> SkeletonSpec:
    """The shipped skeleton without the head: 13 joints, 12 bones, all producible by the renderer."""
    d = skel.to_dict()
    d["joint_names"] = [n for n in d["joint_names"] if n != "head"]
    d["bones"] = [b for b in d["bones"] if "head" not in b]
    d["name"] = "figure13"
    return SkeletonSpec.from_dict(d)


@pytest.fixture(scope="session")
def skel5() -> SkeletonSpec:
    """Chain 0-1-2 plus two branches off the root."""
    return SkeletonSpec(joint_names=("root", "a", "b", "c", "d"),
                        bones=((0, 1), (1, 2), (0, 3), (0, 4)), root=0,
                        evaluated_groups=(("A", (1, 2)), ("B", (3, 4))), name="toy5")


# ---------- Tiny networks and configs ----------

TINY_IMAGE = 64
TINY_GRID = 16


def tiny_network(num_joints: int) -> PoseNetwork:
    # 64 px -> 8 px -> 16 cells
    return PoseNetwork(num_joints, TINY_IMAGE, TINY_GRID, encoder_channels=(8, 16, 16), decoder_channels=(16,))


@pytest.fixture
def tiny_net(skel):
    torch.manual_seed(0)
    return tiny_network(skel.num_joints)


def tiny_config(out_dir: str = "out", **adapt_overrides) -> ExperimentConfig:
    """Everything small enough for a CPU test run in seconds."""
    cfg = ExperimentConfig(
        data=DataConfig(image_size=TINY_IMAGE, heatmap_size=TINY_GRID, sigma=1.0,
                        n_source=12, n_source_occluded=4, n_target_adapt=12, n_target_eval=8,
                        n_sweep_eval=4, n_target_eval_clean=4, patch_count=1),
        posenet=PoseNetConfig(encoder_channels=[8, 16, 16], decoder_channels=[16], epochs=2, batch_size=4,
                              holdout_frac=0.25),
        prior=PriorConfig(feature_dim=8, hidden_dim=16, epochs=3, batch_size=16, n_model_negatives=6),
        adapt=AdaptConfig(epochs=2, iterations_per_epoch=2, batch_size=4, **adapt_overrides),
        seeds=[0],
        out_dir=out_dir,
        overlay_n=2,
    )
    return cfg.validate()


@pytest.fixture
def cfg(tmp_path):
    return tiny_config(str(tmp_path / "out"))


# ---------- Gradient checking ----------

def finite_difference_check(loss_fn, tensor: torch.Tensor, n_probe: int = 12, eps: float = 1e-6,
                            seed: int = 0, where=None) -> float:
    """
    Largest relative error between autograd and central differences on a random slice of `tensor`.
    loss_fn() must read `tensor` (float64, requires_grad) and return a scalar.
    where: optional bool tensor of tensor's shape restricting which entries are probed.
    """
    tensor.grad = None
    loss_fn().backward()
    analytic = tensor.grad.detach().clone().reshape(-1)
    rng = np.random.default_rng(seed)
    flat = tensor.data.view(-1)
    numeric, picked = [], []
    pool = np.arange(flat.numel()) if where is None else np.flatnonzero(where.reshape(-1).numpy())
    for i in rng.choice(pool, size=min(n_probe, len(pool)), replace=False):
        i = int(i)
        old = float(flat[i])
        with torch.no_grad():
            flat[i] = old + eps
            up = float(loss_fn())
            flat[i] = old - eps
            down = float(loss_fn())
            flat[i] = old
        numeric.append((up - down) / (2 * eps))
        picked.append(float(analytic[i]))
    numeric, picked = np.array(numeric), np.array(picked)
    # error relative to the largest gradient on the slice
    scale = max(np.abs(numeric).max(), np.abs(picked).max(), 1e-12)
    return float(np.abs(numeric - picked).max() / scale)


@pytest.fixture
def fd_check():
    return finite_difference_check

