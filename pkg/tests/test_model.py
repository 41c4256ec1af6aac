import numpy as np
import pytest
import torch

from stereo_selftrain.core import StereoSample
from stereo_selftrain.errors import StructureMismatchError
from stereo_selftrain.model import (DISPARITY_MARGIN, ModelConfig, infer, init_parameters,
                                    load_checkpoint, parameter_count, save_checkpoint,
                                    supervised_sequence_loss)

SMALL = ModelConfig(feature_channels=8, hidden_channels=8, context_channels=8, n_iters=4,
                    max_disparity=16)


def closed_form_count(cfg: ModelConfig) -> int:
    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    f, h, c = cfg.feature_channels, cfg.hidden_channels, cfg.context_channels
    corr = cfg.corr_levels * (2 * cfg.corr_radius + 1)
    encoder = conv(3, f // 2, 3) + conv(f // 2, f, 3) + conv(f, f, 3)
    heads = conv(f, f, 1) + conv(f, h + c, 3)
    motion = conv(corr, 32, 1) + conv(1, 16, 3) + conv(48, 31, 3)
    gru = 3 * conv(h + 32 + c, h, 3)
    disp_head = conv(h, 32, 3) + conv(32, 1, 3)
    return encoder + heads + motion + gru + disp_head


def _sample(rng, h=16, w=32):
    img = rng.uniform(size=(h, w, 3)).astype(np.float32)
    return StereoSample(img, np.roll(img, -2, axis=1))


def test_parameter_count_closed_form():
    cfg = ModelConfig()
    assert parameter_count(init_parameters(cfg, 0)) == closed_form_count(cfg) == 212016
    assert parameter_count(init_parameters(SMALL, 0)) == closed_form_count(SMALL)


def test_init_is_seeded():
    a, b, c = init_parameters(SMALL, 3), init_parameters(SMALL, 3), init_parameters(SMALL, 4)
    for (na, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb), na
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_init_does_not_disturb_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    init_parameters(SMALL, 7)
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("kwargs", [dict(n_iters=1), dict(downsample_factor=3), dict(max_disparity=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_infer_rejects_single_iteration(rng):
    with pytest.raises(ValueError):
        infer(init_parameters(SMALL, 0), _sample(rng), n_iters=1)


def test_infer_rejects_tiny_image(rng):
    with pytest.raises(ValueError, match="too small"):
        infer(init_parameters(SMALL, 0), _sample(rng, 4, 8))


def test_infer_deterministic_and_full_resolution(rng):
    model = init_parameters(SMALL, 0)
    s = _sample(rng, 18, 34)
    a, b = infer(model, s), infer(model, s)
    assert a.n == SMALL.n_iters
    assert a.final.shape == (18, 34)
    for pa, pb in zip(a.predictions, b.predictions):
        np.testing.assert_array_equal(pa.values, pb.values)


def test_outputs_bounded(rng):
    model = init_parameters(SMALL, 1)
    # push the update head so increments are large
    with torch.no_grad():
        model.update.head2.bias.fill_(50.0)
    trace = infer(model, _sample(rng))
    for p in trace.predictions:
        assert np.isfinite(p.values).all()
        assert p.values.min() >= 0.0
        assert p.values.max() <= DISPARITY_MARGIN * SMALL.max_disparity + 1e-4


def test_replay_from_mid_trace_state(rng):
    model = init_parameters(SMALL, 2).eval()
    s = _sample(rng)
    left = torch.tensor(s.left).permute(2, 0, 1)[None]
    right = torch.tensor(s.right).permute(2, 0, 1)[None]
    with torch.no_grad():
        full = model(left, right, 6)
        first, state = model(left, right, 3, return_state=True)
        rest = model(left, right, 3, state=state)
    for a, b in zip(full, first + rest):
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)


def test_sequence_loss_examples():
    gt = torch.zeros(1, 1, 2, 2)
    valid = torch.ones_like(gt, dtype=torch.bool)
    assert supervised_sequence_loss([gt, gt], gt, valid).item() == 0.0
    preds = [gt + 1.0, gt + 0.5]
    assert supervised_sequence_loss(preds, gt, valid, 0.9).item() == pytest.approx(1.4)
    assert supervised_sequence_loss(preds, gt, valid, 0.0).item() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        supervised_sequence_loss([torch.zeros(1, 1, 3, 3)], gt, valid)


def test_sequence_loss_ignores_invalid():
    gt = torch.zeros(1, 1, 1, 2)
    valid = torch.tensor([[[[True, False]]]])
    pred = torch.tensor([[[[1.0, 100.0]]]])
    assert supervised_sequence_loss([pred], gt, valid).item() == pytest.approx(1.0)


def _directional_check(model, loss_fn, rng, h=1e-6):
    worst = 0.0
    for name, p in model.named_parameters():
        model.zero_grad()
        loss_fn().backward()
        direction = torch.tensor(rng.normal(size=p.shape), dtype=p.dtype)
        analytic = float((p.grad * direction).sum())
        with torch.no_grad():
            p += h * direction
            up = loss_fn().item()
            p -= 2 * h * direction
            down = loss_fn().item()
            p += h * direction
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-10)
        worst = max(worst, rel)
        assert rel < 1e-3, (name, analytic, numeric)
    return worst


def test_parameter_gradients_match_finite_differences(rng):
    model = init_parameters(ModelConfig(), 0).double()
    s = _sample(rng, 16, 16)
    left = torch.tensor(s.left).permute(2, 0, 1)[None].double()
    right = torch.tensor(s.right).permute(2, 0, 1)[None].double()
    gt = torch.tensor(rng.uniform(0, 4, size=(1, 1, 16, 16)))
    valid = torch.ones_like(gt, dtype=torch.bool)

    def loss_fn():
        return supervised_sequence_loss(model(left, right, 2), gt, valid)

    _directional_check(model, loss_fn, rng)


def test_checkpoint_round_trip(tmp_path):
    model = init_parameters(SMALL, 5)
    path = tmp_path / "m.pt"
    save_checkpoint(path, model, note="x")
    loaded, payload = load_checkpoint(path)
    assert payload["note"] == "x" and loaded.config == SMALL
    for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_structure_mismatch(tmp_path):
    path = tmp_path / "m.pt"
    save_checkpoint(path, init_parameters(SMALL, 5))
    other = ModelConfig(feature_channels=16, hidden_channels=8, context_channels=8, n_iters=4)
    with pytest.raises(StructureMismatchError):
        load_checkpoint(path, other)
