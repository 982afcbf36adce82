import numpy as np
import pytest

from deepchange import synth
from deepchange.synth import (ChangeDirective, ObjectSpec, SceneSpec,
                              SceneSpecError, demo_spec, generate)


def _one_building_spec(change=None, density=10.0):
    objects = [ObjectSpec("building", 20.0, 20.0, 10.0, 10.0, 8.0)]
    changes = [ChangeDirective(0, change)] if change else []
    return SceneSpec(extent=(40.0, 40.0), ground_noise_sigma=0.0,
                     objects=objects, changes=changes, density=density,
                     rng_seed=3)


def test_demolish_reveals_labeled_ground():
    pair = generate(_one_building_spec("demolish"))
    x0, x1, y0, y1 = 15.0, 25.0, 15.0, 25.0
    inside = ((pair.pc2.xyz[:, 0] >= x0) & (pair.pc2.xyz[:, 0] <= x1)
              & (pair.pc2.xyz[:, 1] >= y0) & (pair.pc2.xyz[:, 1] <= y1))
    labels = pair.pc2.labels[inside]
    assert (labels == synth.DEMOLITION).all()
    assert inside.sum() > 0
    # No building points remain over the footprint.
    assert pair.pc2.xyz[inside][:, 2].max() < 1.0
    # Epoch 1 still carries the building.
    in1 = ((pair.pc1.xyz[:, 0] >= x0) & (pair.pc1.xyz[:, 0] <= x1)
           & (pair.pc1.xyz[:, 1] >= y0) & (pair.pc1.xyz[:, 1] <= y1))
    assert pair.pc1.xyz[in1][:, 2].max() > 7.0


def test_no_directives_means_all_unchanged():
    pair = generate(_one_building_spec(None))
    assert (pair.pc2.labels == synth.UNCHANGED).all()


def test_added_building_point_count_matches_area_oracle():
    objects = [
        ObjectSpec("building", 15.0, 15.0, 10.0, 10.0, 8.0),
        ObjectSpec("building", 40.0, 40.0, 10.0, 10.0, 6.0),
        ObjectSpec("building", 40.0, 15.0, 10.0, 10.0, 9.0),
    ]
    spec = SceneSpec(extent=(60.0, 60.0), ground_noise_sigma=0.0,
                     objects=objects, changes=[ChangeDirective(2, "add")],
                     density=10.0, rng_seed=11)
    pair = generate(spec)
    n_new = int((pair.pc2.labels == synth.NEW_BUILDING).sum())
    area = 10.0 * 10.0 + 4 * 10.0 * 9.0  # roof + facades
    expected = area * spec.density
    assert abs(n_new - expected) <= 0.2 * expected


def test_same_seed_bit_identical():
    spec = demo_spec(seed=5, extent=50.0, density=3.0)
    a = generate(spec)
    b = generate(spec)
    np.testing.assert_array_equal(a.pc1.xyz, b.pc1.xyz)
    np.testing.assert_array_equal(a.pc2.xyz, b.pc2.xyz)
    np.testing.assert_array_equal(a.pc2.labels, b.pc2.labels)


def test_different_seed_differs():
    base = demo_spec(seed=5, extent=50.0, density=3.0)
    other = demo_spec(seed=5, extent=50.0, density=3.0)
    other.rng_seed = 6
    a, b = generate(base), generate(other)
    assert not (a.pc1.xyz.shape == b.pc1.xyz.shape
                and np.array_equal(a.pc1.xyz, b.pc1.xyz))


def test_label_partition_sums_to_cloud_size():
    pair = generate(demo_spec(seed=2, extent=60.0, density=4.0))
    counts = np.bincount(pair.pc2.labels, minlength=synth.N_CLASSES)
    assert counts.sum() == pair.pc2.n_points
    assert pair.pc2.labels.min() >= 0
    assert pair.pc2.labels.max() < synth.N_CLASSES


def test_every_directive_produces_its_class():
    spec = demo_spec(seed=4, extent=60.0, density=4.0)
    pair = generate(spec)
    produced = set(np.unique(pair.pc2.labels).tolist())
    for d in spec.changes:
        kind = spec.objects[d.object_id].kind
        expected = {
            "demolish": synth.DEMOLITION,
            "remove": synth.MISSING_VEGETATION,
            "grow": synth.VEGETATION_GROWTH,
            "move": synth.MOBILE_OBJECT,
            "add": {"building": synth.NEW_BUILDING,
                    "vegetation": synth.NEW_VEGETATION,
                    "mobile_object": synth.MOBILE_OBJECT}[kind],
        }[d.change]
        assert expected in produced


def test_growth_points_sit_above_old_envelope():
    objects = [ObjectSpec("vegetation", 20.0, 20.0, 8.0, 8.0, 6.0)]
    spec = SceneSpec(extent=(40.0, 40.0), ground_noise_sigma=0.0,
                     objects=objects,
                     changes=[ChangeDirective(0, "grow", grow_delta=3.0)],
                     density=8.0, rng_seed=1)
    pair = generate(spec)
    grown = pair.pc2.labels == synth.VEGETATION_GROWTH
    assert grown.sum() > 0
    apex = pair.pc2.xyz[grown][:, 2].max()
    assert apex > 6.0  # above the old canopy top


def test_unknown_object_id_raises():
    spec = _one_building_spec(None)
    spec.changes = [ChangeDirective(5, "demolish")]
    with pytest.raises(SceneSpecError, match="unknown object"):
        generate(spec)


def test_wrong_kind_for_change_raises():
    spec = _one_building_spec(None)
    spec.changes = [ChangeDirective(0, "grow")]
    with pytest.raises(SceneSpecError):
        generate(spec)


def test_spec_json_roundtrip():
    spec = demo_spec(seed=9, extent=50.0, density=2.0)
    back = SceneSpec.from_json(spec.to_json())
    assert back.extent == spec.extent
    assert len(back.objects) == len(spec.objects)
    np.testing.assert_array_equal(generate(back).pc2.xyz, generate(spec).pc2.xyz)


def test_footprint_outside_extent_rejected():
    spec = SceneSpec(extent=(10.0, 10.0),
                     objects=[ObjectSpec("building", 9.0, 9.0, 4.0, 4.0, 5.0)])
    with pytest.raises(SceneSpecError, match="outside extent"):
        spec.validate()
