import numpy as np

from csrae import models as M
from csrae.nn import ParamStore


class Toy:
    """A 2-layer encoder/decoder pair with smooth activations for gradient checks."""

    def __init__(self, x_dim=2, z_dim=2, hidden=4, likelihood="gaussian", prior="standard_normal", K=1, seed=0):
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        self.enc = M.MlpEncoder(self.store, x_dim, z_dim, [(hidden, "tanh")], rng, logvar_init="glorot")
        self.dec = M.MlpDecoder(self.store, z_dim, x_dim, [(hidden, "tanh")], rng, likelihood=likelihood)
        if prior == "standard_normal":
            self.prior = M.StandardNormal(z_dim)
        elif prior == "mog":
            self.prior = M.MoGPrior(self.store, K, z_dim, rng)
        else:
            self.prior = M.VampPriorData(self.enc, rng.standard_normal((K, x_dim)))
        self.x_dim, self.z_dim = x_dim, z_dim


# filled by the acceptance suite and printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
