"""Tests for the backbone, detection head, grid decode, and checkpoints."""

import json
import math
import struct

import numpy as np
import pytest

import mosaicbev.numcore as nc
from mosaicbev.errors import CheckpointError, ConfigError
from mosaicbev.model import (
    CHECKPOINT_MAGIC,
    BackboneConfig,
    HeadConfig,
    Model,
    decode,
    load_checkpoint,
    make_grid,
    predictions,
    save_checkpoint,
)
from mosaicbev.numcore import ContractError, Tensor, grad_check, tsum


def tiny_model(seed=0) -> Model:
    backbone = BackboneConfig(
        stem_channels=2,
        stem_kernel=3,
        stages=(((2, 3, 2), (3, 3, 2)), ((4, 3, 2),), ((5, 3, 2),)),
    )
    head = HeadConfig(n_l=3, ch=(3, 4, 5), mid_channels=4)
    return Model(backbone=backbone, head=head, seed=seed)


def rand_input(rng, size=32, batch=1) -> Tensor:
    return Tensor(rng.uniform(0, 1, size=(batch, 3, size, size)))


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------


class TestGrid:
    def test_three_by_three_centers(self):
        g = make_grid(3, 3)
        assert g.center(0, 0) == (1 / 6, 1 / 6)
        assert g.center(1, 2) == (0.5, 5 / 6)
        assert g.center(2, 1) == (5 / 6, 0.5)

    def test_single_cell(self):
        assert make_grid(1, 1).center(0, 0) == (0.5, 0.5)

    def test_formula_exact(self):
        for w, h in ((24, 24), (12, 12), (6, 6), (5, 7)):
            g = make_grid(w, h)
            for m in range(w):
                for n in range(h):
                    assert g.centers[m, n, 0] == (m + 0.5) / w
                    assert g.centers[m, n, 1] == (n + 0.5) / h

    def test_rejects_degenerate(self):
        with pytest.raises(ConfigError):
            make_grid(0, 3)


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


class TestDecode:
    def test_zero_raw_lands_on_cell_centers(self):
        raw = Tensor(np.zeros((1, 4, 3, 3)))
        d = decode(raw, make_grid(3, 3), (0.10, 0.045))
        for n in range(3):
            for m in range(3):
                assert d.x.data[0, n, m] == (m + 0.5) / 3
                assert d.y.data[0, n, m] == (n + 0.5) / 3
        assert np.all(d.theta.data == 0.0)
        assert np.all(d.conf.data == 0.5)

    def test_saturated_raw_reaches_cell_edge(self):
        raw = np.zeros((1, 4, 3, 3))
        raw[0, 0, 0, 0] = 40.0  # tanh saturates to exactly 1.0 in float64
        d = decode(Tensor(raw), make_grid(3, 3), (0.10, 0.045))
        assert math.tanh(40.0) == 1.0
        assert d.x.data[0, 0, 0] == 1 / 3  # 1/(2*3) + 1/6, the right cell edge

    def test_saturated_theta_is_pi(self):
        raw = np.zeros((1, 4, 2, 2))
        raw[0, 2, 0, 0] = 40.0
        raw[0, 2, 0, 1] = -40.0
        d = decode(Tensor(raw), make_grid(2, 2), (0.10, 0.045))
        assert d.theta.data[0, 0, 0] == math.pi
        assert d.theta.data[0, 0, 1] == -math.pi

    def test_decoded_centers_stay_inside_cell(self):
        rng = np.random.default_rng(1)
        raw = Tensor(rng.normal(scale=3.0, size=(2, 4, 5, 4)))
        g = make_grid(4, 5)
        d = decode(raw, g, (0.10, 0.045))
        for b in range(2):
            for n in range(5):
                for m in range(4):
                    cx, cy = g.center(m, n)
                    assert abs(d.x.data[b, n, m] - cx) < 1 / (2 * 4)
                    assert abs(d.y.data[b, n, m] - cy) < 1 / (2 * 5)

    def test_confidence_via_sigmoid(self):
        raw = np.zeros((1, 4, 1, 1))
        raw[0, 3, 0, 0] = -2.0
        d = decode(Tensor(raw), make_grid(1, 1), (0.10, 0.045))
        assert d.conf.data[0, 0, 0] == pytest.approx(1 / (1 + math.exp(2.0)), abs=1e-15)

    def test_shape_validation(self):
        with pytest.raises(ContractError):
            decode(Tensor(np.zeros((1, 3, 3, 3))), make_grid(3, 3), (0.1, 0.05))
        with pytest.raises(ContractError):
            decode(Tensor(np.zeros((1, 4, 3, 3))), make_grid(4, 3), (0.1, 0.05))

    def test_decode_stays_on_graph(self):
        raw = Tensor(np.zeros((1, 4, 2, 2)), requires_grad=True)
        d = decode(raw, make_grid(2, 2), (0.10, 0.045))
        tsum(d.x).backward()
        assert raw.grad is not None
        # d x / d raw[0] = tanh'(0) / (2*W) = 1/4; other channels untouched
        assert np.allclose(raw.grad[0, 0], 0.25)
        assert np.all(raw.grad[0, 1:] == 0.0)


class TestPredictions:
    def test_order_and_cells(self):
        raws = [Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 4, 1, 1)))]
        scales = [
            decode(raws[0], make_grid(2, 2), (0.10, 0.045), scale_index=0),
            decode(raws[1], make_grid(1, 1), (0.10, 0.045), scale_index=1),
        ]
        dets = predictions(scales, 0)
        assert len(dets) == 5
        assert [(d.scale_index, d.cell) for d in dets] == [
            (0, (0, 0)), (0, (1, 0)), (0, (0, 1)), (0, (1, 1)), (1, (0, 0)),
        ]
        assert dets[1].box.cx == 0.75  # cell m=1 of the 2x2 grid
        assert dets[1].box.cy == 0.25

    def test_saturated_negative_theta_folds_to_pi(self):
        raw = np.zeros((1, 4, 1, 1))
        raw[0, 2, 0, 0] = -40.0
        sc = decode(Tensor(raw), make_grid(1, 1), (0.10, 0.045))
        (det,) = predictions([sc], 0)
        assert det.box.theta == math.pi

    def test_batch_index_selects_frame(self):
        raw = np.zeros((2, 4, 1, 1))
        raw[1, 3, 0, 0] = 3.0
        sc = decode(Tensor(raw), make_grid(1, 1), (0.10, 0.045))
        d0 = predictions([sc], 0)[0]
        d1 = predictions([sc], 1)[0]
        assert d0.confidence == 0.5
        assert d1.confidence == pytest.approx(1 / (1 + math.exp(-3.0)), abs=1e-15)


# ---------------------------------------------------------------------------
# model forward
# ---------------------------------------------------------------------------


class TestModelForward:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            HeadConfig(n_l=2, ch=(24, 32, 40))
        with pytest.raises(ConfigError):
            HeadConfig(out_channels=5)
        with pytest.raises(ConfigError):
            BackboneConfig(stem_kernel=4)
        with pytest.raises(ConfigError):
            # stage 0 ends at stride 4, not 8
            BackboneConfig(stages=(((16, 3, 2),), ((32, 3, 2),), ((40, 3, 2),)))
        with pytest.raises(ConfigError):
            Model(head=HeadConfig(ch=(24, 32, 41)))

    def test_config_from_dict_fills_defaults(self):
        h = HeadConfig.from_dict({"mid_channels": 8})
        assert h.mid_channels == 8 and h.ch == HeadConfig().ch
        # n_l inferred from an explicit channel list
        assert HeadConfig.from_dict({"ch": [6, 8]}).n_l == 2
        b = BackboneConfig.from_dict({"stem_channels": 4})
        assert b.stem_channels == 4 and b.stages == BackboneConfig().stages
        assert HeadConfig.from_dict(HeadConfig().to_dict()) == HeadConfig()
        assert BackboneConfig.from_dict(
            BackboneConfig().to_dict()) == BackboneConfig()

    @pytest.mark.parametrize("cls,d", [
        (HeadConfig, {"widths": 3}),
        (HeadConfig, {"mid_channels": "wide"}),
        (HeadConfig, "mid_channels"),
        (BackboneConfig, {"depth": 2}),
        (BackboneConfig, {"stages": [[[4, 3]]]}),
        (BackboneConfig, {"stages": 7}),
    ])
    def test_config_from_dict_rejects_malformed(self, cls, d):
        with pytest.raises(ConfigError):
            cls.from_dict(d)

    def test_tiny_feature_shapes(self):
        m = tiny_model()
        feats = m.backbone_forward(rand_input(np.random.default_rng(2)))
        assert [f.shape for f in feats] == [(1, 3, 4, 4), (1, 4, 2, 2), (1, 5, 1, 1)]

    def test_default_shapes_and_count_192(self):
        m = Model()
        x = rand_input(np.random.default_rng(3), size=192)
        scales = m.forward_decode(x)
        assert [s.x.shape for s in scales] == [(1, 24, 24), (1, 12, 12), (1, 6, 6)]
        dets = predictions(scales, 0)
        assert len(dets) == 24 * 24 + 12 * 12 + 6 * 6 == 756

    def test_head_outputs_four_channels(self):
        m = tiny_model()
        raws = m.custom_detect_forward(
            m.backbone_forward(rand_input(np.random.default_rng(4)))
        )
        assert [r.shape[1] for r in raws] == [4, 4, 4]

    def test_input_validation(self):
        m = tiny_model()
        with pytest.raises(ConfigError):
            m.backbone_forward(Tensor(np.zeros((1, 3, 50, 50))))
        with pytest.raises(ConfigError):
            m.backbone_forward(Tensor(np.zeros((1, 1, 32, 32))))
        with pytest.raises(ConfigError):
            m.custom_detect_forward([Tensor(np.zeros((1, 7, 4, 4)))] * 3)

    def test_zero_final_conv_zeroes_raw(self):
        m = tiny_model()
        for si in range(3):
            m.params[f"head{si}.conv2.w"].data[:] = 0.0
            m.params[f"head{si}.conv2.b"].data[:] = 0.0
        raws = m.custom_detect_forward(
            m.backbone_forward(rand_input(np.random.default_rng(5)))
        )
        for r in raws:
            assert not r.data.any()

    def test_init_properties(self):
        m = tiny_model(seed=7)
        for si in range(3):
            b = m.params[f"head{si}.conv2.b"].data
            assert b[3] == -2.0
            assert np.all(b[:3] == 0.0)
        assert not m.params["stem.b"].data.any()
        w = m.params["stem.w"].data
        bound = 1 / math.sqrt(3 * 3 * 3)
        assert np.all(np.abs(w) <= bound)
        m2 = tiny_model(seed=7)
        assert all(
            np.array_equal(m.params[k].data, m2.params[k].data) for k in m.params
        )
        m3 = tiny_model(seed=8)
        assert any(
            not np.array_equal(m.params[k].data, m3.params[k].data) for k in m.params
        )

    def test_decoded_confidence_starts_low(self):
        m = tiny_model()
        scales = m.forward_decode(rand_input(np.random.default_rng(6)))
        for s in scales:
            assert np.all(s.conf.data < 0.5)
            assert np.all(s.conf.data > 0.0)

    @pytest.mark.parametrize("name", ["stem.w", "stage1.conv0.b",
                                      "head0.conv0.w", "head2.conv2.b"])
    def test_parameter_gradients_match_finite_differences(self, name):
        m = tiny_model()
        x = rand_input(np.random.default_rng(9), size=32)
        t = np.random.default_rng(10).normal(size=(3,))

        def f(p):
            saved = m.params[name]
            m.params[name] = p
            try:
                scales = m.forward_decode(x)
                parts = []
                for s, w in zip(scales, t):
                    parts.append(nc.scale(nc.add(tsum(s.x), tsum(s.theta)), w))
                    parts.append(nc.scale(tsum(s.conf), w * 0.5))
                total = parts[0]
                for p_ in parts[1:]:
                    total = nc.add(total, p_)
                return total
            finally:
                m.params[name] = saved

        assert grad_check(f, m.params[name].data.copy()) < 1e-4


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def rewrite_header(path, mutate):
    """Load, mutate, and re-write the JSON header of a checkpoint file."""
    raw = path.read_bytes()
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[off:off + 8])
    header = json.loads(raw[off + 8:off + 8 + hlen].decode())
    mutate(header)
    payload = json.dumps(header).encode()
    path.write_bytes(
        raw[:off] + struct.pack("<Q", len(payload)) + payload + raw[off + 8 + hlen:]
    )


class TestCheckpoints:
    def test_round_trip_without_optimizer(self, tmp_path):
        m = tiny_model(seed=3)
        p = tmp_path / "model.ybev"
        save_checkpoint(p, m, extra={"step": 17, "stage": "overfit"})
        m2, opt, extra = load_checkpoint(p)
        assert opt is None
        assert extra == {"step": 17, "stage": "overfit"}
        assert m2.config_dict() == m.config_dict()
        assert list(m2.params) == list(m.params)
        for k in m.params:
            assert np.array_equal(m2.params[k].data, m.params[k].data)
            assert m2.params[k].requires_grad

    def test_round_trip_with_optimizer(self, tmp_path):
        m = tiny_model()
        rng = np.random.default_rng(11)
        state = {
            "t": 5, "lr": 0.01, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8,
            "m": {k: rng.normal(size=v.shape) for k, v in m.params.items()},
            "v": {k: rng.uniform(size=v.shape) for k, v in m.params.items()},
        }
        p = tmp_path / "model.ybev"
        save_checkpoint(p, m, optimizer_state=state)
        _, opt, _ = load_checkpoint(p)
        assert opt is not None
        assert (opt["t"], opt["lr"]) == (5, 0.01)
        for k in m.params:
            assert np.array_equal(opt["m"][k], state["m"][k])
            assert np.array_equal(opt["v"][k], state["v"][k])

    def test_no_tmp_file_left_behind(self, tmp_path):
        p = tmp_path / "model.ybev"
        save_checkpoint(p, tiny_model())
        assert [f.name for f in tmp_path.iterdir()] == ["model.ybev"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ybev")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "model.ybev"
        save_checkpoint(p, tiny_model())
        raw = bytearray(p.read_bytes())
        raw[:5] = b"WRONG"
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError) as e:
            load_checkpoint(p)
        assert "magic" in str(e.value)

    def test_truncated_blob(self, tmp_path):
        p = tmp_path / "model.ybev"
        save_checkpoint(p, tiny_model())
        p.write_bytes(p.read_bytes()[:-20])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_header_only(self, tmp_path):
        p = tmp_path / "model.ybev"
        save_checkpoint(p, tiny_model())
        raw = p.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[5:13])
        p.write_bytes(raw[:13 + hlen])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_shape_mismatch_via_config_edit(self, tmp_path):
        p = tmp_path / "model.ybev"
        save_checkpoint(p, tiny_model())
        rewrite_header(p, lambda h: h["config"]["head"].update(mid_channels=5))
        with pytest.raises(CheckpointError) as e:
            load_checkpoint(p)
        assert "shape" in str(e.value)

    def test_missing_config_block(self, tmp_path):
        p = tmp_path / "model.ybev"
        save_checkpoint(p, tiny_model())
        rewrite_header(p, lambda h: h.pop("config"))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
