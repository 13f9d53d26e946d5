import numpy as np
import pytest
import torch

from bevreloc.camera import Camera, CameraRig, default_rig
from bevreloc.models.bev import (
    BevDecoder,
    DepthBins,
    FeaturePyramid,
    ImageEncoder,
    lift_splat,
)
from bevreloc.se2 import BEV_SPEC, GridSpec


def tiny_rig(n=2, width=48, height=32, fov_focal=40.0):
    cams = tuple(Camera(yaw=k * np.pi / 2, position=(0.0, 0.0, 1.6), fx=fov_focal,
                        fy=fov_focal, cx=(width - 1) / 2, cy=(height - 1) / 2,
                        width=width, height=height)
                 for k in range(n))
    return CameraRig(cams)


class TestDepthBins:
    def test_default_count(self):
        bins = DepthBins()
        assert bins.count == 56
        centers = bins.centers()
        assert centers[0] == 4.5 and centers[-1] == 59.5
        assert (np.diff(centers) > 0).all()

    def test_invalid(self):
        with pytest.raises(ValueError):
            DepthBins(10.0, 4.0, 1.0)
        with pytest.raises(ValueError):
            DepthBins(4.0, 60.0, 0.9)  # does not tile


class TestImageEncoder:
    def test_output_shapes_and_softmax(self):
        torch.manual_seed(0)
        rig = default_rig(6)
        enc = ImageEncoder(rig, DepthBins(), d_img=32, width=8).eval()
        imgs = torch.rand(1, 6, 3, 128, 352)
        feats, depth = enc(imgs)
        assert feats.shape == (1, 6, 32, 16, 44)
        assert depth.shape == (1, 6, 56, 16, 44)
        torch.testing.assert_close(depth.sum(dim=2), torch.ones(1, 6, 16, 44),
                                   atol=1e-5, rtol=0)

    def test_deterministic(self):
        torch.manual_seed(0)
        rig = default_rig(1)
        enc = ImageEncoder(rig, DepthBins(), d_img=16, width=8).eval()
        imgs = torch.rand(1, 1, 3, 128, 352)
        a, _ = enc(imgs)
        b, _ = enc(imgs.clone())
        torch.testing.assert_close(a, b)

    def test_wrong_resolution_rejected(self):
        rig = default_rig(1)
        enc = ImageEncoder(rig, DepthBins(), d_img=16, width=8)
        with pytest.raises(ValueError):
            enc(torch.rand(1, 1, 3, 64, 352))
        with pytest.raises(ValueError):
            enc(torch.rand(1, 2, 3, 128, 352))


def splat_oracle(features, depths, rig, spec, bins):
    """Brute-force triple loop over cameras, bins, and feature pixels."""
    b, n, c, h, w = features.shape
    out = np.zeros((b, c, spec.rows, spec.cols))
    centers = bins.centers()
    ih, iw = rig.image_size
    for bi in range(b):
        for k, cam in enumerate(rig.cameras):
            r = cam.rotation_ego_from_cam()
            for i in range(h):
                for j in range(w):
                    u = (j + 0.5) * (iw / w) - 0.5
                    v = (i + 0.5) * (ih / h) - 0.5
                    ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
                    for q, d in enumerate(centers):
                        p = r @ (ray * d) + np.asarray(cam.position)
                        row = int(np.floor((spec.x_range[1] - p[0]) / spec.resolution))
                        col = int(np.floor((spec.y_range[1] - p[1]) / spec.resolution))
                        if 0 <= row < spec.rows and 0 <= col < spec.cols:
                            out[bi, :, row, col] += (depths[bi, k, q, i, j]
                                                     * features[bi, k, :, i, j])
    return out


class TestLiftSplat:
    spec = GridSpec(rows=32, cols=32, resolution=1.0, x_range=(-16.0, 16.0),
                    y_range=(-16.0, 16.0))
    bins = DepthBins(2.0, 12.0, 2.0)  # 5 bins, centers 3..11

    def test_single_ray_lands_in_hand_projected_cell(self):
        rig = tiny_rig(1)
        feats = torch.zeros(1, 1, 1, 32, 48)
        depths = torch.zeros(1, 1, 5, 32, 48)
        i, j, q = 10, 7, 3
        feats[0, 0, 0, i, j] = 1.0
        depths[0, 0, q, i, j] = 1.0
        out = lift_splat(feats, depths, rig, self.spec, self.bins)

        cam = rig.cameras[0]
        u = (j + 0.5) * (48 / 48) - 0.5
        v = (i + 0.5) * (32 / 32) - 0.5
        d = self.bins.centers()[q]
        ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
        p = cam.rotation_ego_from_cam() @ (ray * d) + np.asarray(cam.position)
        row = int(np.floor((16.0 - p[0]) / 1.0))
        col = int(np.floor((16.0 - p[1]) / 1.0))

        nz = out.nonzero()
        assert nz.shape[0] == 1
        assert out[0, 0, row, col].item() == pytest.approx(1.0)

    def test_zero_features_zero_bev(self):
        rig = tiny_rig(2)
        out = lift_splat(torch.zeros(1, 2, 3, 32, 48), torch.rand(1, 2, 5, 32, 48)
                         .softmax(dim=2), rig, self.spec, self.bins)
        assert out.abs().sum().item() == 0.0

    def test_matches_triple_loop_oracle(self):
        torch.manual_seed(1)
        rig = tiny_rig(2, width=6 * 8, height=4 * 8)
        feats = torch.rand(1, 2, 3, 4, 6, dtype=torch.float64)
        depths = torch.rand(1, 2, 5, 4, 6, dtype=torch.float64).softmax(dim=2)
        out = lift_splat(feats, depths, rig, self.spec, self.bins)
        expect = splat_oracle(feats.numpy(), depths.numpy(), rig, self.spec, self.bins)
        np.testing.assert_allclose(out.numpy(), expect, atol=1e-6)

    def test_linearity(self):
        torch.manual_seed(2)
        rig = tiny_rig(2, width=6 * 8, height=4 * 8)
        f1 = torch.rand(1, 2, 3, 4, 6)
        f2 = torch.rand(1, 2, 3, 4, 6)
        depths = torch.rand(1, 2, 5, 4, 6).softmax(dim=2)
        a, b = 1.7, -0.6
        combined = lift_splat(a * f1 + b * f2, depths, rig, self.spec, self.bins)
        separate = a * lift_splat(f1, depths, rig, self.spec, self.bins) \
            + b * lift_splat(f2, depths, rig, self.spec, self.bins)
        torch.testing.assert_close(combined, separate, atol=1e-5, rtol=0)

    def test_mass_conserved_up_to_discards(self):
        torch.manual_seed(3)
        rig = tiny_rig(2, width=6 * 8, height=4 * 8)
        feats = torch.rand(1, 2, 3, 4, 6)
        depths = torch.rand(1, 2, 5, 4, 6).softmax(dim=2)
        splat_mass = lift_splat(feats, depths, rig, self.spec, self.bins).sum().item()
        full_mass = (feats.unsqueeze(3) * depths.unsqueeze(2)).sum().item()
        assert splat_mass <= full_mass + 1e-5

        # generous grid catches every projection: equality
        big = GridSpec(rows=64, cols=64, resolution=1.0, x_range=(-32.0, 32.0),
                       y_range=(-32.0, 32.0))
        splat_mass = lift_splat(feats, depths, rig, big, self.bins).sum().item()
        assert abs(splat_mass - full_mass) < 1e-5

    def test_shape_validation(self):
        rig = tiny_rig(1)
        with pytest.raises(ValueError):
            lift_splat(torch.zeros(1, 1, 2, 4, 6), torch.zeros(1, 1, 9, 4, 6),
                       rig, self.spec, self.bins)


class TestBevDecoder:
    def test_canonical_dims(self):
        torch.manual_seed(0)
        dec = BevDecoder(32, d_coarse=64, d_fine=16, width=8).eval()
        pyr, seg = dec(torch.rand(1, 32, 256, 128), BEV_SPEC)
        assert pyr.coarse.shape == (1, 64, 128, 64)
        assert pyr.fine.shape == (1, 16, 256, 128)
        assert seg.shape == (1, 3, 256, 128)

    def test_oracle_stem_path(self):
        from bevreloc.models import LocalizationModel, ModelConfig
        from bevreloc.models.registration import RegistrationConfig

        torch.manual_seed(0)
        model = LocalizationModel(
            ModelConfig(mode="oracle", bev_width=4, map_width=4, raw_channels=8,
                        d_coarse=8, d_fine=4),
            RegistrationConfig(n_layers=1, n_heads=2, token_dim=16,
                               downsample_factor=16, head_hidden_dims=(16, 8)),
        ).eval()
        raw = model.encode_observation({"oracle_bev": torch.rand(1, 3, 256, 128)})
        assert raw.shape == (1, 8, 256, 128)

    def test_gradient_reaches_image_encoder(self):
        torch.manual_seed(0)
        rig = tiny_rig(1, width=48, height=32)
        enc = ImageEncoder(rig, DepthBins(2.0, 12.0, 2.0), d_img=8, width=4)
        dec = BevDecoder(8, d_coarse=8, d_fine=4, width=4)
        spec = GridSpec(rows=32, cols=32, resolution=1.0, x_range=(-16.0, 16.0),
                        y_range=(-16.0, 16.0))
        imgs = torch.rand(1, 1, 3, 32, 48)
        feats, depths = enc(imgs)
        raw = lift_splat(feats, depths, rig, spec, DepthBins(2.0, 12.0, 2.0))
        _, seg = dec(raw, spec)
        seg.sum().backward()
        grads = [p.grad for p in enc.parameters() if p.grad is not None]
        assert grads and any(g.abs().sum() > 0 for g in grads)


class TestFeaturePyramid:
    def test_invariants(self):
        with pytest.raises(ValueError):
            FeaturePyramid(torch.zeros(1, 8, 10, 10), torch.zeros(1, 4, 16, 16), BEV_SPEC)
        with pytest.raises(ValueError):
            FeaturePyramid(torch.zeros(1, 4, 8, 8), torch.zeros(1, 8, 16, 16), BEV_SPEC)
        FeaturePyramid(torch.zeros(1, 8, 8, 8), torch.zeros(1, 4, 16, 16), BEV_SPEC)


class TestSplatDecodeGradientCheck:
    def test_finite_differences_through_splat_and_decode(self):
        torch.manual_seed(4)
        rig = tiny_rig(1, width=32, height=16)
        bins = DepthBins(2.0, 8.0, 2.0)  # 3 bins
        spec = GridSpec(rows=8, cols=8, resolution=2.0, x_range=(-8.0, 8.0),
                        y_range=(-8.0, 8.0))
        dec = BevDecoder(2, d_coarse=4, d_fine=2, width=2).double().eval()
        w = torch.rand(1, 2, 8, 8, dtype=torch.float64)

        base = torch.rand(1, 1, 2, 2, 4, dtype=torch.float64)
        depths = torch.rand(1, 1, 3, 2, 4, dtype=torch.float64).softmax(dim=2)

        def loss_fn(f):
            raw = lift_splat(f, depths, rig, spec, bins)
            pyr, seg = dec(raw, spec)
            return (pyr.fine * w[:, :2]).sum() + seg.sum() * 0.1

        f = base.clone().requires_grad_(True)
        loss_fn(f).backward()
        grad = f.grad.reshape(-1).numpy()

        h = 1e-4
        flat = base.reshape(-1)
        fd = np.zeros(flat.numel())
        for k in range(flat.numel()):
            vals = []
            for sign in (+1, -1):
                pert = flat.clone()
                pert[k] += sign * h
                vals.append(loss_fn(pert.reshape(base.shape)).item())
            fd[k] = (vals[0] - vals[1]) / (2 * h)
        rel = np.abs(grad - fd) / max(1.0, np.abs(fd).max())
        assert rel.max() < 1e-4
