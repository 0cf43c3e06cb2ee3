import numpy as np
import pytest

from jadnet.cli import build_network, load_data, train_config
from jadnet.config import RunConfig
from jadnet.netcore import Activation, Layer, Network
from jadnet.training import train

# low-contrast ramps: at full contrast no 8/255 perturbation flips the classifier
DESK = {"data.contrast": 0.1, "detect.softmax_head": True}


def random_net(rng, dims, alpha=0.01, head=None):
    layers = []
    for i in range(len(dims) - 1):
        W = rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i])
        act = Activation.leaky(alpha) if i < len(dims) - 2 or head is None else head
        layers.append(Layer(W, 0.1 * rng.standard_normal(dims[i + 1]), act))
    return Network(layers)


def rel_err(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def central_fd(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


class Desk:
    def __init__(self):
        self.cfg = RunConfig(DESK)
        self.train_set, self.test_set = load_data(self.cfg)
        net = build_network(self.cfg, self.train_set)
        self.net, self.history = train(net, self.train_set, train_config(self.cfg))
        self.x, self.y = self.test_set.images, self.test_set.labels


@pytest.fixture(scope="session")
def desk():
    return Desk()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
