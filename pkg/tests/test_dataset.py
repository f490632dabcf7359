import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from Phantom.dataset import (
    LEAK_HEADER,
    DatasetConfig,
    DatasetManifest,
    assign_splits,
    build_dataset,
    load_pair,
    load_split,
    split_sizes,
)
from Phantom.dataset_utils import (
    DatasetIncompleteError,
    describe_dataset_status,
    is_dataset_dir_complete,
    resolve_dataset_directory,
)
from Phantom.pgm import read_pgm_samples
from Phantom.projector import ProjectionGeometry, forward_project, project_sweep
from Phantom.volume import PhantomParams, build_phantom

TINY_GEOMETRY = ProjectionGeometry(
    n_views=4, angular_increment=90.0, detector_h=16, detector_w=16, detector_pixel_size=5.0
)
TINY_PHANTOM = PhantomParams(seed=0, grid_size=(16, 16, 16), spacing=5.0, supersample=1)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("dataset")
    return build_dataset(3, TINY_GEOMETRY, TINY_PHANTOM, 0, out_dir, show_progress=False)


@pytest.mark.parametrize(
    "n, expected",
    [(3, (1, 1, 1)), (11, (9, 1, 1)), (16, (13, 1, 2)), (55, (45, 5, 5))],
)
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected


def test_split_sizes_needs_three_phantoms():
    with pytest.raises(ValueError):
        split_sizes(2)


def test_assign_splits_is_a_seeded_partition():
    first = assign_splits(16, 5)
    assert first == assign_splits(16, 5)
    assert sorted(first) == list(range(16))
    counts = {name: sum(1 for split in first.values() if split == name) for name in ("train", "val", "test")}
    assert counts == {"train": 13, "val": 1, "test": 2}


def test_dataset_layout(tiny_dataset):
    assert len(tiny_dataset.records) == 3 * 4
    assert tiny_dataset.counts() == {"train": 4, "val": 4, "test": 4}
    phantoms = [set(tiny_dataset.phantoms(name)) for name in ("train", "val", "test")]
    assert set.union(*phantoms) == {0, 1, 2}
    assert all(not (a & b) for i, a in enumerate(phantoms) for b in phantoms[i + 1 :])

    reread = DatasetManifest.read(tiny_dataset.root)
    assert reread.records == tiny_dataset.records
    assert reread.leaked_bone_pixels == tiny_dataset.leaked_bone_pixels


def test_manifest_records_the_bone_leak_count(tiny_dataset, tmp_path):
    first = tiny_dataset.path.read_text(encoding="utf-8").splitlines()[0]
    assert first == f"{LEAK_HEADER}{tiny_dataset.leaked_bone_pixels}"

    leaky = DatasetManifest(root=tmp_path, records=list(tiny_dataset.records), leaked_bone_pixels=7)
    leaky.write()
    reread = DatasetManifest.read(tmp_path)
    assert reread.leaked_bone_pixels == 7
    assert reread.records == tiny_dataset.records


def test_project_sweep_covers_every_view():
    volume = build_phantom(TINY_PHANTOM)
    views = project_sweep(volume, TINY_GEOMETRY)
    assert len(views) == TINY_GEOMETRY.n_views
    for view, image in enumerate(views):
        assert torch.equal(image, forward_project(volume, TINY_GEOMETRY, view))


def test_stored_conditions_use_the_label_lattice(tiny_dataset):
    for record in tiny_dataset.records:
        contour = read_pgm_samples(tiny_dataset.resolve(record.contour_path))
        contour_bone = read_pgm_samples(tiny_dataset.resolve(record.contour_bone_path))
        assert set(contour.flatten().tolist()) <= {0, 32768}
        assert set(contour_bone.flatten().tolist()) <= {0, 32768, 65535}
        assert 32768 in set(contour.flatten().tolist())


def test_radiographs_are_normalised_per_phantom(tiny_dataset):
    samples = [
        read_pgm_samples(tiny_dataset.resolve(r.radiograph_path))
        for r in tiny_dataset.records
        if r.phantom_id == 0
    ]
    assert min(int(s.min()) for s in samples) == 0
    assert max(int(s.max()) for s in samples) == 65535


def test_load_pair_snaps_conditions(tiny_dataset):
    record = tiny_dataset.records[0]
    image, contour = load_pair(tiny_dataset, record, "contour")
    _, contour_bone = load_pair(tiny_dataset, record, "contour_bone")
    assert image.shape == contour.shape == (1, 16, 16)
    assert set(contour.unique().tolist()) <= {0.0, 0.5}
    assert set(contour_bone.unique().tolist()) <= {0.0, 0.5, 1.0}
    assert set((contour_bone - contour).unique().tolist()) <= {0.0, 0.5}
    assert 1.0 in set(contour_bone.unique().tolist())
    with pytest.raises(ValueError):
        load_pair(tiny_dataset, record, "bone_only")


def test_load_split_stacks_one_split(tiny_dataset):
    images, conditions = load_split(tiny_dataset, "train", "contour_bone", dtype=torch.float32)
    assert images.shape == conditions.shape == (4, 1, 16, 16)
    assert images.dtype == torch.float32
    assert float(images.min()) >= 0.0 and float(images.max()) <= 1.0


def test_dataset_is_byte_identical_on_rerun(tiny_dataset, tmp_path):
    again = build_dataset(3, TINY_GEOMETRY, TINY_PHANTOM, 0, tmp_path / "again", show_progress=False)
    assert again.path.read_bytes() == tiny_dataset.path.read_bytes()
    for a, b in zip(tiny_dataset.records, again.records):
        assert tiny_dataset.resolve(a.radiograph_path).read_bytes() == again.resolve(b.radiograph_path).read_bytes()
        assert tiny_dataset.resolve(a.contour_bone_path).read_bytes() == again.resolve(b.contour_bone_path).read_bytes()


def test_dataset_directory_checks(tiny_dataset, tmp_path):
    assert is_dataset_dir_complete(tiny_dataset.root)
    assert describe_dataset_status(tiny_dataset.root) == "complete"
    assert resolve_dataset_directory(tiny_dataset.root) == tiny_dataset.root.resolve()

    assert not is_dataset_dir_complete(tmp_path)
    assert "manifest.tsv" in describe_dataset_status(tmp_path)
    with pytest.raises(DatasetIncompleteError):
        resolve_dataset_directory(tmp_path / "nowhere")


def test_missing_images_are_reported(tmp_path):
    manifest = build_dataset(3, TINY_GEOMETRY, TINY_PHANTOM, 1, tmp_path / "data", show_progress=False)
    victim = manifest.resolve(manifest.records[0].radiograph_path)
    victim.unlink()
    assert not is_dataset_dir_complete(manifest.root)
    assert manifest.records[0].radiograph_path in describe_dataset_status(manifest.root)


def test_dataset_config_validation():
    DatasetConfig().validate()
    with pytest.raises(ValueError):
        DatasetConfig(n_phantoms=2).validate()
    with pytest.raises(ValueError):
        DatasetConfig(contour_threshold=1.5).validate()
