import numpy as np
import pytest
import torch
import torch.nn.functional as F

from pmnet.model import (
    PMNet,
    PmnetConfig,
    ShapeContractError,
    atrous_conv2d,
    build_pmnet,
    expected_trace,
    load_checkpoint,
    save_checkpoint,
)

torch.manual_seed(0)


# ---------------------------------------------------------------- oracle

def direct_conv_oracle(f, w, r, stride=1, padding=0):
    """Quadruple-loop dilated convolution, straight from the definition."""
    f = np.pad(np.asarray(f, dtype=np.float64), ((0, 0), (padding, padding), (padding, padding)))
    c_out, c_in, k, _ = w.shape
    span = r * (k - 1) + 1
    h_out = (f.shape[1] - span) // stride + 1
    w_out = (f.shape[2] - span) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for c in range(c_in):
                    for m in range(k):
                        for n in range(k):
                            acc += f[c, i * stride + r * m, j * stride + r * n] * w[o, c, m, n]
                out[o, i, j] = acc
    return out


@pytest.mark.parametrize("r", [1, 2, 3])
def test_atrous_matches_direct_oracle(r):
    rng = np.random.default_rng(r)
    f = rng.normal(size=(1, 8, 8))
    w = rng.normal(size=(1, 1, 3, 3))
    got = atrous_conv2d(f, w, r=r)
    want = direct_conv_oracle(f, w, r=r)
    assert np.allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("r,stride,padding", [(1, 1, 0), (2, 1, 2), (3, 2, 3), (2, 2, 0)])
def test_atrous_matches_oracle_multichannel(r, stride, padding):
    rng = np.random.default_rng(10 * r + stride)
    f = rng.normal(size=(3, 11, 9))
    w = rng.normal(size=(2, 3, 3, 3))
    got = atrous_conv2d(f, w, r=r, stride=stride, padding=padding)
    want = direct_conv_oracle(f, w, r=r, stride=stride, padding=padding)
    assert got.shape == want.shape
    assert np.allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_atrous_matches_torch_dilated_conv(r):
    rng = np.random.default_rng(r + 100)
    f = rng.normal(size=(3, 10, 10))
    w = rng.normal(size=(4, 3, 3, 3))
    got = atrous_conv2d(f, w, r=r, padding=r)
    want = F.conv2d(
        torch.from_numpy(f[None]), torch.from_numpy(w), dilation=r, padding=r
    ).numpy()[0]
    assert np.allclose(got, want, atol=1e-10)


def test_atrous_rate_one_is_standard_convolution():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(1, 8, 8))
    w = rng.normal(size=(1, 1, 3, 3))
    assert np.allclose(atrous_conv2d(f, w, r=1), direct_conv_oracle(f, w, r=1), atol=1e-12)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_atrous_delta_kernel_identity(r):
    rng = np.random.default_rng(6)
    f = rng.normal(size=(1, 9, 9))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = atrous_conv2d(f, w, r=r, padding=r)
    assert np.allclose(out, f, atol=1e-12)


def test_atrous_constant_ones_interior():
    f = np.ones((1, 9, 9))
    w = np.ones((1, 1, 3, 3))
    out = atrous_conv2d(f, w, r=2)
    assert out.shape == (1, 5, 5)
    assert np.allclose(out, 9.0)


def test_atrous_receptive_field_footprint():
    # with r=2 a 3x3 kernel sees a 5x5 input neighborhood
    w = np.ones((1, 1, 3, 3))
    base = np.zeros((1, 11, 11))
    ref = atrous_conv2d(base, w, r=2, padding=2)
    sensitive = []
    for y in range(11):
        for x in range(11):
            probe = base.copy()
            probe[0, y, x] = 1.0
            out = atrous_conv2d(probe, w, r=2, padding=2)
            if out[0, 5, 5] != ref[0, 5, 5]:
                sensitive.append((x, y))
    xs = [p[0] for p in sensitive]
    ys = [p[1] for p in sensitive]
    assert min(xs) == 3 and max(xs) == 7 and min(ys) == 3 and max(ys) == 7
    assert len(sensitive) == 9  # the 3x3 taps inside the 5x5 footprint


def test_atrous_validation():
    f = np.zeros((2, 8, 8))
    with pytest.raises(ValueError):
        atrous_conv2d(f, np.zeros((1, 3, 3, 3)))  # channel mismatch
    with pytest.raises(ValueError):
        atrous_conv2d(f, np.zeros((1, 2, 4, 4)))  # even kernel
    with pytest.raises(ValueError):
        atrous_conv2d(f, np.zeros((1, 2, 3, 3)), r=0)


# ---------------------------------------------------------------- shapes

TABLE_SHAPES = [
    ("input", (2, 256, 256)),
    ("enc1", (64, 65, 65)),
    ("enc2", (256, 65, 65)),
    ("enc3", (512, 33, 33)),
    ("enc4", (512, 17, 17)),
    ("enc5", (1024, 17, 17)),
    ("enc6", (512, 17, 17)),
    ("dec6", (512 + 512, 17, 17)),
    ("dec5", (512 + 512, 33, 33)),
    ("dec4", (256 + 256, 65, 65)),
    ("dec3", (256 + 256, 65, 65)),
    ("dec2", (256 + 64, 65, 65)),
    ("dec1", (128 + 2, 256, 256)),
    ("output", (1, 256, 256)),
]


@pytest.mark.slow
def test_default_config_reproduces_stage_table():
    model = build_pmnet(PmnetConfig(), seed=0)
    assert model.forward_trace() == TABLE_SHAPES


def test_expected_trace_matches_stage_table():
    assert expected_trace(PmnetConfig()) == TABLE_SHAPES


def test_output_stride_16_halves_deep_stages():
    cfg = PmnetConfig(output_stride=16, base_width=16, reslayer_block_counts=(1, 1, 1, 1))
    model = build_pmnet(cfg, seed=0)
    trace = dict(model.forward_trace())
    assert trace["enc3"][1:] == (17, 17)
    assert trace["enc4"][1:] == (9, 9)


def test_parameter_count_deterministic():
    cfg = PmnetConfig.tiny()
    a = build_pmnet(cfg, seed=1).parameter_count()
    b = build_pmnet(cfg, seed=2).parameter_count()
    assert a == b > 0


def test_desk_profile_builds():
    model = build_pmnet(PmnetConfig.desk(), seed=0)
    trace = dict(model.forward_trace())
    assert trace["input"] == (2, 128, 128)
    assert trace["output"] == (1, 128, 128)
    assert trace["enc4"][1:] == (9, 9)


# ---------------------------------------------------------------- forward

def test_forward_zero_input_bounded():
    model = build_pmnet(PmnetConfig.tiny(), seed=0).eval()
    with torch.no_grad():
        out = model(torch.zeros(1, 2, 64, 64))
    assert out.shape == (1, 1, 64, 64)
    assert torch.isfinite(out).all()
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_forward_output_range_random_inputs():
    model = build_pmnet(PmnetConfig.tiny(), seed=0).eval()
    with torch.no_grad():
        out = model(torch.rand(2, 2, 64, 64))
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert torch.isfinite(out).all()


def test_forward_batch_invariance():
    model = build_pmnet(PmnetConfig.tiny(), seed=0).eval()
    x = torch.rand(3, 2, 64, 64)
    with torch.no_grad():
        batched = model(x)
        singles = torch.cat([model(x[i : i + 1]) for i in range(3)])
    assert torch.allclose(batched, singles, atol=1e-6)


def test_forward_rejects_bad_shape():
    model = build_pmnet(PmnetConfig.tiny(), seed=0)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 64, 64))


def test_all_parameters_receive_gradient():
    model = build_pmnet(PmnetConfig.tiny(), seed=0).train()
    x = torch.rand(2, 2, 64, 64)
    y = torch.rand(2, 1, 64, 64)
    loss = F.mse_loss(model(x), y)
    loss.backward()
    dead = [
        name
        for name, p in model.named_parameters()
        if p.grad is None or not p.grad.abs().max() > 0
    ]
    assert not dead, f"parameters with zero gradient: {dead}"


def test_gradient_matches_finite_differences():
    torch.manual_seed(3)
    model = build_pmnet(PmnetConfig.tiny(), seed=3).double().eval()
    x = torch.rand(1, 2, 64, 64, dtype=torch.float64)
    y = torch.rand(1, 1, 64, 64, dtype=torch.float64)

    def loss_fn():
        return F.mse_loss(model(x), y)

    loss = loss_fn()
    loss.backward()

    rng = np.random.default_rng(0)
    params = [(n, p) for n, p in model.named_parameters()]
    checked = 0
    h = 1e-6
    failures = []
    while checked < 100:
        name, p = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        if abs(analytic - fd) > 1e-3 * max(abs(analytic), abs(fd)) + 1e-8:
            failures.append((name, idx, analytic, fd))
        checked += 1
    assert not failures, failures[:5]


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_identical(tmp_path):
    model = build_pmnet(PmnetConfig.tiny(), seed=4).eval()
    x = torch.rand(1, 2, 64, 64)
    with torch.no_grad():
        before = model(x)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(model, path, meta={"epoch": 3, "val_mse": 0.01})
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 3, "val_mse": 0.01}
    assert loaded.cfg == model.cfg
    with torch.no_grad():
        after = loaded(x)
    assert torch.equal(before, after)


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.pt"
    torch.save({"format": "other"}, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)
