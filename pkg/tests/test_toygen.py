import numpy as np
import pytest
import torch

from e4elab import toygen
from e4elab.errors import InvalidArgument, NumericError
from e4elab.latent_geometry import replicate
from e4elab.toygen import GeneratorConfig, ToyGenerator

DEBUG = GeneratorConfig(z_dim=6, latent_dim=8, num_layers=3, resolution=4, channels=4)


@pytest.fixture
def debug_gen():
    torch.manual_seed(0)
    return ToyGenerator(DEBUG).double()


def test_block_layout_reaches_resolution():
    assert GeneratorConfig().block_resolutions() == [4, 8, 8, 16, 16, 32]
    assert DEBUG.block_resolutions() == [4, 4, 4]
    with pytest.raises(InvalidArgument):
        GeneratorConfig(num_layers=2, resolution=32).block_resolutions()


def test_map_latent_deterministic_and_zero_weights():
    torch.manual_seed(1)
    gen = ToyGenerator(GeneratorConfig())
    z = np.random.default_rng(0).normal(size=32)
    assert toygen.map_latent(z, gen).tobytes() == toygen.map_latent(z, gen).tobytes()
    assert toygen.map_latent(z, gen).shape == (64,)
    with torch.no_grad():
        for p in gen.mapping.parameters():
            p.zero_()
    np.testing.assert_array_equal(toygen.map_latent(z, gen), np.zeros(64))
    with pytest.raises(InvalidArgument):
        toygen.map_latent(np.zeros(5), gen)


def test_map_latent_gradient_matches_finite_differences(debug_gen):
    z = torch.randn(DEBUG.z_dim, dtype=torch.float64, requires_grad=True)
    (grad,) = torch.autograd.grad(debug_gen.mapping(z[None])[0, 2], z)
    h = 1e-4
    fd = torch.zeros_like(z)
    with torch.no_grad():
        for i in range(z.numel()):
            e = torch.zeros_like(z)
            e[i] = h
            fd[i] = (debug_gen.mapping((z + e)[None])[0, 2] - debug_gen.mapping((z - e)[None])[0, 2]) / (2 * h)
    torch.testing.assert_close(grad, fd, rtol=1e-4, atol=1e-8)


def test_synthesize_shape_determinism_and_errors():
    torch.manual_seed(2)
    gen = ToyGenerator()
    s = np.random.default_rng(1).normal(size=(6, 64))
    img = toygen.synthesize(s, gen)
    assert img.shape == (32, 32, 3)
    assert img.tobytes() == toygen.synthesize(s, gen).tobytes()
    with pytest.raises(InvalidArgument):
        toygen.synthesize(np.zeros((5, 64)), gen)
    with pytest.raises(NumericError, match="style layer 0"):
        toygen.synthesize(np.full((6, 64), np.inf), gen)


def test_perturbing_entry_i_leaves_earlier_layers_unchanged():
    torch.manual_seed(3)
    gen = ToyGenerator()
    ws = torch.randn(2, 6, 64)
    acts = {}

    def capture(tag):
        def hook(i):
            return lambda mod, inp, out: acts.setdefault(tag, {}).__setitem__(i, out.detach().clone())
        return hook

    for tag, stack in (("base", ws), ("pert", ws.clone().index_add_(1, torch.tensor([3]), torch.ones(2, 1, 64)))):
        handles = [b.register_forward_hook(capture(tag)(i)) for i, b in enumerate(gen.blocks)]
        with torch.no_grad():
            gen.synthesize(stack)
        for h in handles:
            h.remove()
    for i in range(3):
        assert torch.equal(acts["base"][i], acts["pert"][i])
    assert not torch.equal(acts["base"][3], acts["pert"][3])


def test_synthesis_jvp_matches_finite_differences(debug_gen):
    s = torch.randn(1, 3, 8, dtype=torch.float64)
    v = torch.randn_like(s)
    _, jvp = torch.func.jvp(lambda t: debug_gen.synthesize(t), (s,), (v,))
    h = 1e-5
    with torch.no_grad():
        fd = (debug_gen.synthesize(s + h * v) - debug_gen.synthesize(s - h * v)) / (2 * h)
    torch.testing.assert_close(jvp, fd, rtol=1e-3, atol=1e-7)


def test_sample_w_determinism_and_statistics():
    torch.manual_seed(4)
    gen = ToyGenerator(GeneratorConfig(z_dim=64))
    assert toygen.sample_w(1, gen, seed=5).tobytes() == toygen.sample_w(1, gen, seed=5).tobytes()
    with pytest.raises(InvalidArgument):
        toygen.sample_w(0, gen, seed=5)
    gen.mapping = torch.nn.Identity()
    n = 10000
    w = toygen.sample_w(n, gen, seed=6)
    assert np.all(np.abs(w.mean(axis=0)) < 4 / np.sqrt(n))


def test_sefa_identity_and_diagonal():
    vecs, lam = toygen.sefa_from_weight(np.eye(5), 5)
    np.testing.assert_array_equal(np.stack(vecs), np.eye(5))
    a = np.diag([3.0, 1.0, 0.5, 0.2])
    vecs, lam = toygen.sefa_from_weight(a, 2)
    np.testing.assert_allclose(vecs[0], [1, 0, 0, 0], atol=1e-15)
    assert lam[0] == pytest.approx(9.0)
    with pytest.raises(InvalidArgument):
        toygen.sefa_from_weight(a, 5)


def test_sefa_random_matrix_against_dense_solver():
    a = np.random.default_rng(7).normal(size=(8, 8))
    vecs, lam = toygen.sefa_from_weight(a, 8)
    ata = a.T @ a
    ref = np.sort(np.linalg.eigvals(ata).real)[::-1]
    np.testing.assert_allclose(lam, ref, rtol=1e-10)
    for v, l in zip(vecs, lam):
        assert np.linalg.norm(ata @ v - l * v) <= 1e-8
        assert v[np.argmax(np.abs(v))] > 0
    m = np.stack(vecs)
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(m @ m.T, np.eye(8), atol=1e-7)


def test_sefa_directions_from_generator():
    torch.manual_seed(8)
    gen = ToyGenerator()
    assert np.linalg.matrix_rank(gen.blocks[0].affine.weight.detach().numpy()) == 64
    dirs = toygen.sefa_directions(gen, 4)
    assert [d.method for d in dirs] == ["sefa"] * 4
    assert dirs[0].layers(6) == (0, 5)


def test_replicated_stack_is_the_w_image():
    torch.manual_seed(9)
    gen = ToyGenerator()
    z = torch.randn(1, 32)
    with torch.no_grad():
        direct = gen(z)[0]
        w = gen.mapping(z)[0].numpy()
    img = toygen.synthesize(replicate(w, 6), gen)
    np.testing.assert_allclose(img, toygen.tensor_to_images(direct[None])[0], rtol=1e-5, atol=1e-6)
