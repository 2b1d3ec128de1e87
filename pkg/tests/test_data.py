import numpy as np
import pytest

from attralign import data


def tiny_spec(**kw):
    defaults = dict(size=32, counts=(12, 4, 4, 4), seed=5)
    defaults.update(kw)
    return data.GenSpec(**defaults)


class TestGenerate:
    def test_deterministic_regeneration(self):
        a = data.generate(tiny_spec())
        b = data.generate(tiny_spec())
        assert list(a.samples) == list(b.samples)
        for sid in a.samples:
            assert np.array_equal(a.samples[sid].image, b.samples[sid].image)
            assert a.samples[sid].masks.keys() == b.samples[sid].masks.keys()
            for k in a.samples[sid].masks:
                assert np.array_equal(a.samples[sid].masks[k], b.samples[sid].masks[k])

    def test_different_seed_differs(self):
        a = data.generate(tiny_spec())
        b = data.generate(tiny_spec(seed=6))
        assert any(not np.array_equal(a.samples[s].image, b.samples[s].image)
                   for s in a.samples)

    def test_splits_disjoint_and_complete(self):
        ds = data.generate(tiny_spec())
        all_ids = [sid for name in ds.splits for sid in ds.splits[name]]
        assert len(all_ids) == len(set(all_ids)) == len(ds.samples)
        assert [len(ds.splits[n]) for n in data.SPLIT_NAMES] == [12, 4, 4, 4]

    def test_mask_label_consistency(self):
        ds = data.generate(tiny_spec())
        for s in ds.samples.values():
            for k, positive in enumerate(s.labels):
                assert (k in s.masks) == bool(positive)
            for m in s.masks.values():
                assert m.sum() > 0
                assert set(np.unique(m)) <= {0, 1}

    def test_images_in_unit_range_and_quantized(self):
        ds = data.generate(tiny_spec())
        for s in ds.samples.values():
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert np.allclose(s.image * 255, np.round(s.image * 255), atol=1e-9)

    def test_single_class_spec(self):
        spec = tiny_spec(classes=(("disk", "solid"),), label_probs=(1.0,))
        ds = data.generate(spec)
        for s in ds.samples.values():
            assert list(s.masks) == [0]

    def test_confounder_correlates_with_label0(self):
        spec = data.GenSpec(size=32, counts=(400, 50, 50, 50), seed=9,
                            confounder=True, confounder_strength=0.9)
        ds = data.generate(spec)
        patch, lab = [], []
        for s in ds.samples.values():
            region = s.image[0][data.CONFOUNDER_BOX]
            patch.append(1.0 if region.mean() > 0.8 else 0.0)
            lab.append(float(s.labels[0]))
        corr = np.corrcoef(patch, lab)[0, 1]
        assert abs(corr - (2 * 0.9 - 1)) <= 0.05

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError, match="size"):
            data.GenSpec(size=8)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            data.GenSpec(label_probs=(1.5, 0.5, 0.5))
        with pytest.raises(ValueError, match="label_probs"):
            data.GenSpec(label_probs=(0.5, 0.5))
        with pytest.raises(ValueError, match="counts"):
            data.GenSpec(counts=(10, 10, 10))


class TestRoundTrip:
    def test_generate_save_load_equal(self, tmp_path):
        ds = data.generate(tiny_spec())
        data.save_directory(ds, str(tmp_path))
        back = data.load_directory(str(tmp_path))
        assert back.class_names == ds.class_names
        assert back.splits == ds.splits
        assert back.spec == ds.spec
        assert set(back.samples) == set(ds.samples)
        for sid, s in ds.samples.items():
            b = back.samples[sid]
            assert np.array_equal(b.image, s.image)
            assert np.array_equal(b.labels, s.labels)
            assert b.masks.keys() == s.masks.keys()
            for k in s.masks:
                assert np.array_equal(b.masks[k], s.masks[k])

    def test_rgb_roundtrip(self, tmp_path):
        ds = data.generate(tiny_spec(channels=3, counts=(2, 1, 1, 1)))
        data.save_directory(ds, str(tmp_path))
        back = data.load_directory(str(tmp_path))
        sid = next(iter(ds.samples))
        assert back.samples[sid].image.shape == (3, 32, 32)
        assert np.array_equal(back.samples[sid].image, ds.samples[sid].image)

    def test_grayscale_normalization(self, tmp_path):
        ds = data.generate(tiny_spec(counts=(1, 1, 1, 1)))
        data.save_directory(ds, str(tmp_path))
        back = data.load_directory(str(tmp_path))
        img = next(iter(back.samples.values())).image
        # 8-bit PNG values map onto the k/255 grid
        assert np.all((img * 255) == np.round(img * 255))


class TestLoaderValidation:
    def test_unknown_sample_id_is_hard_error(self, tmp_path):
        ds = data.generate(tiny_spec(counts=(2, 1, 1, 1)))
        data.save_directory(ds, str(tmp_path))
        with open(tmp_path / "labels.csv", "a", newline="") as fh:
            fh.write("ghost,1,0,0\r\n")
        with pytest.raises(ValueError, match="unknown sample id 'ghost'"):
            data.load_directory(str(tmp_path))

    def test_malformed_row_reports_line_number(self, tmp_path):
        ds = data.generate(tiny_spec(counts=(2, 1, 1, 1)))
        data.save_directory(ds, str(tmp_path))
        with open(tmp_path / "labels.csv", "a", newline="") as fh:
            fh.write("000000,1\r\n")
        with pytest.raises(ValueError, match=r"labels\.csv:7"):
            data.load_directory(str(tmp_path))

    def test_missing_mask_excludes_with_warning(self, tmp_path, caplog):
        import logging, os
        ds = data.generate(tiny_spec(counts=(4, 1, 1, 1)))
        data.save_directory(ds, str(tmp_path))
        victim = next(sid for sid, s in ds.samples.items() if s.masks)
        k = next(iter(ds.samples[victim].masks))
        os.remove(tmp_path / "masks" / f"{victim}_label{k}.png")
        with caplog.at_level(logging.WARNING):
            back = data.load_directory(str(tmp_path))
        assert victim in back.excluded
        assert victim not in back.samples
        assert all(victim not in ids for ids in back.splits.values())

    def test_dataset_id_stable(self):
        a = data.generate(tiny_spec())
        b = data.generate(tiny_spec())
        assert a.dataset_id == b.dataset_id
        assert a.dataset_id != data.generate(tiny_spec(seed=6)).dataset_id
