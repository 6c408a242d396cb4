import numpy as np
import pytest

from partpose import scene
from partpose.geom import Pose
from partpose.scene import build_template, eval_points, find_connections


class TestBuildTemplate:
    def test_revolute2_structure(self):
        t = build_template("revolute2", 200, 7)
        assert t.num_parts == 2
        assert len(t.connections) == 1
        assert t.bbox_diag == 1.0

    def test_multibody3_touching_pairs(self):
        t = build_template("multibody3", 100, 1)
        assert t.num_parts == 3
        # oracle: count pairs with any inter-part point distance < threshold
        world = [p.rest_frame.apply(p.positions) for p in t.parts]
        touching = 0
        for a in range(3):
            for b in range(a + 1, 3):
                d = np.linalg.norm(world[a][:, None] - world[b][None, :], axis=-1)
                if (d < scene.CONNECTION_DIST_THRESHOLD).sum() >= scene.CONNECTION_MIN_PAIRS:
                    touching += 1
        assert touching == 2
        assert len(t.connections) == 2

    def test_deterministic(self):
        a = build_template("prismatic2", 50, 3)
        b = build_template("prismatic2", 50, 3)
        for pa, pb in zip(a.parts, b.parts):
            assert np.array_equal(pa.positions, pb.positions)
            assert np.array_equal(pa.features, pb.features)
            assert np.array_equal(pa.radii, pb.radii)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            build_template("hexapod", 50, 0)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            build_template("revolute2", 3, 0)

    @pytest.mark.parametrize("kind", scene.TEMPLATE_KINDS)
    def test_normalization(self, kind):
        t = build_template(kind, 80, 11)
        world = np.concatenate([p.rest_frame.apply(p.positions) for p in t.parts])
        diffs = world[:, None] - world[None, :]
        assert np.sqrt((diffs**2).sum(-1)).max() == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("kind", scene.TEMPLATE_KINDS)
    def test_part_centroids_zero(self, kind):
        t = build_template(kind, 64, 5)
        for p in t.parts:
            assert np.allclose(p.positions.mean(axis=0), 0.0, atol=1e-9)

    def test_feature_clusters_separated(self):
        t = build_template("revolute2", 150, 9)
        mus = [p.features.mean(axis=0) for p in t.parts]
        spread = max(
            float(np.linalg.norm(p.features - m, axis=1).max())
            for p, m in zip(t.parts, mus)
        )
        assert np.linalg.norm(mus[0] - mus[1]) >= 2.0 * spread * 0.9


class TestFindConnections:
    def _two_cubes(self, gap):
        """Two unit-ish cubes along x separated by `gap` (0 = abutting)."""
        rng = np.random.default_rng(0)
        half = np.array([0.15, 0.15, 0.15])
        pts_a = scene._sample_box_surface(rng, np.array([-0.15 - gap / 2, 0, 0]), half, 400)
        pts_b = scene._sample_box_surface(rng, np.array([0.15 + gap / 2, 0, 0]), half, 400)
        parts = []
        for pid, pts in enumerate([pts_a, pts_b]):
            c = pts.mean(axis=0)
            parts.append(
                scene.Part(
                    id=pid,
                    positions=pts - c,
                    features=np.zeros((400, 4)),
                    radii=np.full(400, 0.05),
                    rest_frame=Pose(np.eye(3), c),
                )
            )
        return scene.ObjectTemplate(parts, [], 1.0, 4)

    def test_separated_parts_unconnected(self):
        t = self._two_cubes(gap=0.3)
        assert find_connections(t, 0.03) == []

    def test_abutting_cubes_centroid_on_shared_face(self):
        t = self._two_cubes(gap=0.0)
        conns = find_connections(t, 0.03)
        assert len(conns) == 1
        # analytic face center of the construction: x=0, y=0, z=0
        assert np.linalg.norm(conns[0].centroid - np.zeros(3)) < 0.02

    def test_infinite_threshold_connects_everything(self):
        t = build_template("multibody3", 60, 2)
        conns = find_connections(t, np.inf)
        assert len(conns) == 3  # all P(P-1)/2 pairs

    def test_symmetric_in_part_order(self):
        t = build_template("revolute3", 60, 4)
        conns = find_connections(t, 0.03)
        reversed_parts = scene.ObjectTemplate(
            list(reversed(t.parts)), [], t.bbox_diag, t.feature_dim
        )
        conns_rev = find_connections(reversed_parts, 0.03)
        pairs = {(c.part_a, c.part_b) for c in conns}
        pairs_rev = {(min(c.part_a, c.part_b), max(c.part_a, c.part_b)) for c in conns_rev}
        assert pairs == pairs_rev


class TestEvalPoints:
    def test_one_point_per_part_when_equal(self):
        t = build_template("revolute3", 50, 6)
        pts = eval_points(t, 3, 0)
        assert sorted(pid for pid, _ in pts) == [0, 1, 2]

    def test_proportional_split(self):
        t = build_template("revolute2", 300, 8)
        pts = eval_points(t, 500, 1)
        counts = {0: 0, 1: 0}
        for pid, _ in pts:
            counts[pid] += 1
        assert counts == {0: 250, 1: 250}

    def test_deterministic(self):
        t = build_template("revolute2", 100, 8)
        a = eval_points(t, 40, 5)
        b = eval_points(t, 40, 5)
        assert all(pa == pb and np.array_equal(xa, xb) for (pa, xa), (pb, xb) in zip(a, b))


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        t = build_template("prismatic2", 40, 12)
        path = tmp_path / "template.json"
        scene.save_template(t, path)
        t2 = scene.load_template(path)
        assert t2.num_parts == t.num_parts
        assert t2.feature_dim == t.feature_dim
        for pa, pb in zip(t.parts, t2.parts):
            assert np.allclose(pa.positions, pb.positions)
            assert np.allclose(pa.features, pb.features)
            assert np.allclose(pa.radii, pb.radii)
            assert np.allclose(pa.rest_frame.rot, pb.rest_frame.rot)
        assert len(t2.connections) == len(t.connections)

    def test_pose_config_roundtrip(self):
        rng = np.random.default_rng(3)
        from partpose import geom

        cfg = scene.PoseConfig(geom.random_pose(rng), [geom.random_pose(rng) for _ in range(2)])
        d = cfg.to_json()
        cfg2 = scene.PoseConfig.from_json(d)
        assert np.allclose(cfg2.obj_cam.rot, cfg.obj_cam.rot)
        assert np.allclose(cfg2.parts[1].t, cfg.parts[1].t)
