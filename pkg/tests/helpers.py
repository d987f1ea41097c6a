"""Statistical helpers shared by the test modules."""
import numpy as np
from scipy import stats


def chi_square_pvalue(samples, pmf, min_expected=5.0):
    """Goodness-of-fit p-value of integer samples against ``pmf``.

    Adjacent low-expectation outcomes are pooled so every bin expects at
    least ``min_expected`` counts.
    """
    samples = np.asarray(samples)
    pmf = np.asarray(pmf, dtype=np.float64)
    observed = np.bincount(samples, minlength=pmf.size).astype(np.float64)
    expected = pmf * samples.size
    obs_bins, exp_bins = [], []
    o = e = 0.0
    for oi, ei in zip(observed, expected):
        o += oi
        e += ei
        if e >= min_expected:
            obs_bins.append(o)
            exp_bins.append(e)
            o = e = 0.0
    if e > 0 or o > 0:
        if exp_bins:
            obs_bins[-1] += o
            exp_bins[-1] += e
        else:
            obs_bins.append(o)
            exp_bins.append(e)
    if len(exp_bins) < 2:
        return 1.0
    return float(stats.chisquare(obs_bins, exp_bins).pvalue)


def total_variation(samples, pmf):
    pmf = np.asarray(pmf, dtype=np.float64)
    emp = np.bincount(np.asarray(samples), minlength=pmf.size) / len(samples)
    return 0.5 * float(np.abs(emp - pmf).sum())


def binomial_ci(p, draws, sigmas=4.0):
    return sigmas * np.sqrt(p * (1 - p) / draws)


def tiny_cnn(seed=0, with_bn=True, size=8, classes=3):
    """conv -> [bn] -> relu -> maxpool -> conv -> [bn] -> relu -> gap -> dense."""
    from psb.graph import Layer, Model
    rng = np.random.default_rng(seed)
    layers = [Layer("c1", "conv2d", ("input",), weight=rng.normal(0, 0.5, (3, 3, 1, 4)),
                    bias=rng.normal(0, 0.1, 4))]
    prev = "c1"
    if with_bn:
        layers.append(Layer("bn1", "batchnorm", ("c1",), scale=rng.uniform(0.5, 2, 4),
                            offset=rng.uniform(-0.3, 0.3, 4)))
        prev = "bn1"
    layers += [Layer("r1", "relu", (prev,)), Layer("p1", "maxpool", ("r1",), pool=2),
               Layer("c2", "conv2d", ("p1",), weight=rng.normal(0, 0.4, (3, 3, 4, 5)),
                     bias=rng.normal(0, 0.1, 5))]
    prev = "c2"
    if with_bn:
        layers.append(Layer("bn2", "batchnorm", ("c2",), scale=rng.uniform(0.5, 2, 5),
                            offset=rng.uniform(-0.3, 0.3, 5)))
        prev = "bn2"
    layers += [Layer("r2", "relu", (prev,)), Layer("gap", "global_avgpool", ("r2",)),
               Layer("fc", "dense", ("gap",), weight=rng.normal(0, 0.8, (classes, 5)),
                     bias=rng.normal(0, 0.1, classes))]
    return Model(layers, (size, size, 1), {"format": "float"}, "tiny")


def mlp(seed=0, d_in=6, hidden=8, classes=3):
    from psb.graph import Layer, Model
    rng = np.random.default_rng(seed)
    layers = [Layer("d1", "dense", ("input",), weight=rng.normal(0, 0.6, (hidden, d_in)),
                    bias=rng.normal(0, 0.1, hidden)),
              Layer("r1", "relu", ("d1",)),
              Layer("d2", "dense", ("r1",), weight=rng.normal(0, 0.6, (classes, hidden)),
                    bias=rng.normal(0, 0.1, classes))]
    return Model(layers, (d_in,), {"format": "float"}, "mlp")


def grid_cnn(size=10, seed=0):
    """Two same-padded convs on one grid, then pooling and a dense head."""
    from psb.encoding import EncodingConfig
    from psb.graph import Layer, Model, convert_to_psb
    rng = np.random.default_rng(seed)
    m = Model([Layer("c1", "conv2d", weight=rng.normal(0, 0.5, (3, 3, 1, 3))),
               Layer("r1", "relu", ("c1",)),
               Layer("c2", "conv2d", ("r1",), weight=rng.normal(0, 0.5, (3, 3, 3, 4))),
               Layer("r2", "relu", ("c2",)),
               Layer("g", "global_avgpool", ("r2",)),
               Layer("d", "dense", ("g",), weight=rng.normal(0, 1, (2, 4)))], (size, size, 1))
    return convert_to_psb(m, EncodingConfig(prob_bits=10))
