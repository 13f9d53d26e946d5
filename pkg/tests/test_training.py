import json
import math

import numpy as np
import pytest
import torch

from bevreloc.models import LocalizationModel, ModelConfig, load_checkpoint
from bevreloc.models.registration import RegistrationConfig
from bevreloc.se2 import GridSpec
from bevreloc.training import (
    ArrayDataset,
    LossWeights,
    TrainConfig,
    crop_resize_batch,
    pose_loss,
    seg_loss,
    total_loss,
    train,
)

MICRO_BEV = GridSpec(64, 32, 0.5, (-16.0, 16.0), (-8.0, 8.0))
MICRO_MAP = GridSpec(64, 64, 0.5, (-16.0, 16.0), (-16.0, 16.0))


def micro_model(variant="coarse_to_fine", seed=0):
    torch.manual_seed(seed)
    return LocalizationModel(
        ModelConfig(mode="oracle", bev_spec=MICRO_BEV, map_spec=MICRO_MAP,
                    d_coarse=8, d_fine=4, bev_width=4, map_width=4, raw_channels=8),
        RegistrationConfig(n_layers=1, n_heads=2, token_dim=16, downsample_factor=4,
                           head_hidden_dims=(16, 8), variant=variant),
    )


def micro_records(n, seed=0):
    """Miniature but geometrically consistent samples on the micro grids."""
    from bevreloc.raster import rasterize
    from bevreloc.se2 import PoseOffset, compose
    from bevreloc.vectormap import Building, MapNode, VectorMap

    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        ang = rng.uniform(-0.3, 0.3)
        lane = np.array([[-20 * math.cos(ang), -20 * math.sin(ang)],
                         [20 * math.cos(ang), 20 * math.sin(ang)]])
        cx, cy = rng.uniform(-8, 8, 2)
        half = rng.uniform(2, 4)
        vmap = VectorMap(
            lanes=[lane], lane_widths=[4.0],
            buildings=[Building(np.array([[cx - half, cy - half], [cx + half, cy - half],
                                          [cx + half, cy + half], [cx - half, cy + half]]))],
            nodes=[MapNode(rng.uniform(-6, 6), rng.uniform(-6, 6))],
            bounds=(-24, -24, 24, 24),
        )
        gt = PoseOffset(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-0.2, 0.2))
        xi1 = PoseOffset(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-0.15, 0.15))
        noisy = compose(gt, xi1)
        labels = rasterize(vmap, MICRO_BEV, gt).channels
        map_labels = rasterize(vmap, MICRO_MAP, gt).channels
        patch = rasterize(vmap, MICRO_MAP, noisy).channels
        records.append({
            "oracle_bev": (np.packbits(labels), (3, 64, 32)),
            "map_patch": (np.packbits(patch), (3, 64, 64)),
            "bev_labels": (np.packbits(labels), (3, 64, 32)),
            "map_labels": (np.packbits(map_labels), (3, 64, 64)),
            "xi1": xi1.as_array().astype(np.float32),
        })
    return records


def micro_dataset(n, seed=0):
    return ArrayDataset(micro_records(n, seed), "oracle")


class TestPoseLoss:
    def test_zero_residual(self):
        x = torch.tensor([[3.0, -2.0, 0.4]])
        assert pose_loss(x, x).item() == 0.0

    def test_half_scale_residual(self):
        pred = torch.tensor([[15.0, 0.0, 0.0]])
        target = torch.zeros(1, 3)
        # normalized residual (0.5, 0, 0): smooth-L1 0.5^2/2, mean over 3
        assert pose_loss(pred, target).item() == pytest.approx(0.125 / 3, abs=1e-6)

    def test_angle_wraps_before_normalization(self):
        pred = torch.tensor([[0.0, 0.0, -math.pi + 0.01]])
        target = torch.tensor([[0.0, 0.0, math.pi - 0.01]])
        expect = pose_loss(torch.tensor([[0.0, 0.0, 0.02]]), torch.zeros(1, 3))
        assert pose_loss(pred, target).item() == pytest.approx(expect.item(), abs=1e-7)
        assert pose_loss(pred, target).item() < 1e-3  # nowhere near 2*pi

    def test_beta_switches_to_linear(self):
        pred = torch.tensor([[90.0, 0.0, 0.0]])  # normalized residual 3.0
        target = torch.zeros(1, 3)
        assert pose_loss(pred, target, beta=1.0).item() == pytest.approx((3.0 - 0.5) / 3)


class TestSegLoss:
    def test_saturated_correct_predictions(self):
        labels = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        logits = (labels * 2 - 1) * 50.0
        assert seg_loss(logits, labels).item() < 1e-6

    def test_logits_zero_is_ln2(self):
        for labels in (torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4),
                       torch.randint(0, 2, (1, 3, 4, 4)).float()):
            got = seg_loss(torch.zeros(1, 3, 4, 4), labels).item()
            assert got == pytest.approx(math.log(2.0), abs=1e-6)

    def test_mean_reduction_size_invariant(self):
        labels = torch.randint(0, 2, (1, 1, 4, 4)).float()
        logits = torch.randn(1, 1, 4, 4)
        small = seg_loss(logits, labels).item()
        big = seg_loss(logits.repeat(1, 1, 2, 2), labels.repeat(1, 1, 2, 2)).item()
        assert small == pytest.approx(big, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            seg_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


class TestTotalLoss:
    def outputs_and_batch(self, seed=0):
        torch.manual_seed(seed)
        model = micro_model()
        ds = micro_dataset(2, seed)
        batch = ds.get_batch([0, 1])
        return model(batch), batch

    def test_zero_weights_zero_total(self):
        outputs, batch = self.outputs_and_batch()
        total, breakdown = total_loss(outputs, batch, LossWeights(0, 0, 0, 0))
        assert total.item() == 0.0
        assert breakdown["loss_bev"] > 0  # components still reported

    def test_perfect_coarse_makes_fine_target_zero(self):
        outputs, batch = self.outputs_and_batch()
        outputs = dict(outputs)
        outputs["xi_c"] = batch["xi1"].clone()
        total, breakdown = total_loss(outputs, batch, LossWeights(1, 1, 0, 0))
        expect_f = pose_loss(outputs["xi_f"], torch.zeros_like(outputs["xi_f"]))
        assert breakdown["loss_c"] == pytest.approx(0.0, abs=1e-7)
        assert breakdown["loss_f"] == pytest.approx(expect_f.item(), abs=1e-6)

    def test_pose_only_configuration(self):
        outputs, batch = self.outputs_and_batch()
        total, breakdown = total_loss(outputs, batch, LossWeights(1, 1, 0, 0))
        assert total.item() == pytest.approx(breakdown["loss_c"] + breakdown["loss_f"],
                                             abs=1e-6)

    def test_fine_target_is_detached(self):
        # with the refinement inputs cut, the fine loss must not reach
        # stage-1 parameters through the target
        model = micro_model()
        ds = micro_dataset(2)
        batch = ds.get_batch([0, 1])

        raw = model.encode_observation(batch)
        bev_pyr, _ = model.bev_decoder(raw, model.config.bev_spec)
        map_pyr, _ = model.map_unet(batch["map_patch"], model.config.map_spec)
        xi_c = model.localizer.stage_coarse(bev_pyr.coarse, map_pyr.coarse)

        from bevreloc.models.pose_ops import residual_target_t
        from bevreloc.models.warp import warp_features

        warped = warp_features(bev_pyr.fine, xi_c, model.config.bev_spec).detach()
        xi_f = model.localizer.stage_fine(warped, map_pyr.fine.detach())
        xi2 = residual_target_t(batch["xi1"], xi_c.detach())
        loss_f = pose_loss(xi_f, xi2)
        loss_f.backward()

        stage1 = list(model.localizer.stage_coarse.parameters())
        assert all(p.grad is None or p.grad.abs().sum() == 0 for p in stage1)

    def test_gradients_reach_every_parameter_group(self):
        model = micro_model()
        ds = micro_dataset(2)
        batch = ds.get_batch([0, 1])
        total, _ = total_loss(model(batch), batch, LossWeights())
        total.backward()
        for name, params in model.parameter_groups().items():
            got = sum(float(p.grad.abs().sum()) for p in params if p.grad is not None)
            assert got > 0, f"no gradient in group {name}"


class TestTrain:
    def test_step_count_and_log(self, tmp_path):
        model = micro_model()
        ds = micro_dataset(8)
        cfg = TrainConfig(epochs=1, batch_size=4, lr=1e-3, seed=0)
        last = train(cfg, ds, model, out_dir=tmp_path / "run")
        lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 2  # 8 samples / batch 4
        record = json.loads(lines[0])
        assert {"loss", "loss_c", "loss_f", "loss_bev", "loss_map", "lr",
                "step", "epoch"} <= set(record)
        assert last.exists()
        loaded, payload = load_checkpoint(last)
        assert payload["extra"]["train_config"]["epochs"] == 1

    def test_seeded_rerun_reproduces_first_step_loss(self, tmp_path):
        losses = []
        for attempt in range(2):
            model = micro_model(seed=3)
            ds = micro_dataset(4, seed=1)
            cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3, seed=5)
            train(cfg, ds, model, out_dir=tmp_path / f"run{attempt}")
            log = (tmp_path / f"run{attempt}" / "train_log.jsonl").read_text().splitlines()
            losses.append([json.loads(l)["loss"] for l in log])
        assert losses[0][0] == pytest.approx(losses[1][0], abs=1e-6)
        assert losses[0][1] == pytest.approx(losses[1][1], abs=1e-6)

    def test_cosine_schedule_reaches_zero(self, tmp_path):
        model = micro_model()
        ds = micro_dataset(4)
        cfg = TrainConfig(epochs=2, batch_size=2, lr=1e-3, seed=0)
        train(cfg, ds, model, out_dir=tmp_path / "run")
        lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
        final_lr = json.loads(lines[-1])["lr"]
        assert final_lr < 1e-6 * cfg.lr

    def test_nan_loss_aborts_with_dump(self, tmp_path):
        model = micro_model()
        with torch.no_grad():
            model.oracle_stem.weight[0, 0, 0, 0] = float("nan")
        ds = micro_dataset(2)
        cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3, seed=0)
        with pytest.raises(RuntimeError, match="non-finite"):
            train(cfg, ds, model, out_dir=tmp_path / "run")
        assert (tmp_path / "run" / "nan_dump.pt").exists()

    def test_single_sample_overfit(self, tmp_path):
        torch.manual_seed(1)
        model = LocalizationModel(
            ModelConfig(mode="oracle", bev_spec=MICRO_BEV, map_spec=MICRO_MAP,
                        d_coarse=8, d_fine=4, bev_width=8, map_width=8, raw_channels=8),
            RegistrationConfig(n_layers=1, n_heads=2, token_dim=16, downsample_factor=4,
                               head_hidden_dims=(16, 8)),
        )
        ds = micro_dataset(1, seed=2)
        cfg = TrainConfig(epochs=200, batch_size=1, lr=1e-2, seed=0)
        train(cfg, ds, model, out_dir=tmp_path / "run")
        lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
        first = json.loads(lines[0])["loss"]
        last = json.loads(lines[-1])["loss"]
        assert last < 0.05 * first, (first, last)

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            train(TrainConfig(epochs=1, batch_size=1), ArrayDataset([], "oracle"),
                  micro_model(), out_dir=tmp_path / "run")


class TestCameraAugs:
    def test_crop_resize_preserves_ray_geometry(self):
        from bevreloc.camera import default_rig

        rig = default_rig(1)
        rng = np.random.default_rng(0)
        images = torch.rand(1, 1, 3, 128, 352)
        _, adjusted = crop_resize_batch(images, rig, rng)
        cam0, cam1 = rig.cameras[0], adjusted.cameras[0]
        # a world ray visible in both must unproject identically:
        # pick original pixel u, map into the cropped/resized image
        sx = cam1.fx / cam0.fx
        ox = cam0.cx - cam1.cx / sx
        for u in (100.0, 176.0, 250.0):
            u_new = (u - ox) * sx
            ray_old = (u - cam0.cx) / cam0.fx
            ray_new = (u_new - cam1.cx) / cam1.fx
            assert ray_old == pytest.approx(ray_new, abs=1e-9)

    def test_mirror_pairs_on_default_rig(self):
        from bevreloc.camera import default_rig
        from bevreloc.training import _yaw_mirror_pairs

        pairs = _yaw_mirror_pairs(default_rig(6))
        # yaws 0,60,120,180,240,300 -> mirror partner has negated yaw
        assert pairs == [(0, 0), (1, 5), (2, 4), (3, 3), (4, 2), (5, 1)]

    def test_camera_mode_training_step(self, tmp_path):
        from bevreloc.camera import default_rig

        torch.manual_seed(0)
        rig = default_rig(2)
        model = LocalizationModel(
            ModelConfig(mode="camera", bev_spec=MICRO_BEV, map_spec=MICRO_MAP,
                        d_coarse=8, d_fine=4, bev_width=4, map_width=4,
                        d_img=8, img_width=4, n_cameras=2),
            RegistrationConfig(n_layers=1, n_heads=2, token_dim=16,
                               downsample_factor=4, head_hidden_dims=(16, 8)),
            rig,
        )
        rng = np.random.default_rng(0)
        records = micro_records(2)
        for rec in records:
            del rec["oracle_bev"]
            rec["images"] = rng.integers(0, 255, (2, 3, 128, 352), dtype=np.uint8)
        ds = ArrayDataset(records, "camera")
        cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3, seed=0)
        last = train(cfg, ds, model, out_dir=tmp_path / "cam_run")
        assert last.exists()
