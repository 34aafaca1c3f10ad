from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docfuse.data import (DatasetManifest, ProtocolSpec, Record, SynthConfig, format_manifest, generate_synthetic,
                          kfold_splits, load_manifest, load_sample, manifest_from_layout, misspell, parse_manifest,
                          protocol_splits, stratified_quota, synth_image, filler_words, write_manifest)
from docfuse.embeddings import SubwordEmbedder, tokenize
from docfuse.errors import ConfigError, DataError
from docfuse.nn import make_rng
from docfuse.vision import encode_pgm, read_raster, write_pgm

HEADER = "id,image,text,label,split\n"
PRINTABLE = st.characters(blacklist_categories=("Cc", "Cs", "Zl", "Zp"))
# published per-class sizes of the 3482-document tobacco corpus
TOBACCO_COUNTS = [230, 599, 431, 567, 620, 188, 201, 265, 120, 261]


def make_pair(root, stem, text="hello world", size=(12, 10)):
    (root / f"{stem}.pgm").write_bytes(encode_pgm(np.full(size, 100, np.uint8)))
    (root / f"{stem}.txt").write_text(text, encoding="utf-8")


class TestManifest:
    def test_two_line_file(self, tmp_path):
        make_pair(tmp_path, "a")
        make_pair(tmp_path, "b")
        (tmp_path / "m.csv").write_text(HEADER + "a,a.pgm,a.txt,memo,train\nb,b.pgm,b.txt,letter,test\n")
        m = load_manifest(tmp_path / "m.csv")
        assert len(m) == 2 and m.label_names == ["letter", "memo"]
        assert m.records[0] == Record("a", "a.pgm", "a.txt", "memo", "train")
        assert m.labels().tolist() == [1, 0]
        assert m.image_path(m.records[0]) == tmp_path / "a.pgm"

    def test_ten_label_names(self):
        rows = "".join(f"d{i},x.pgm,x.txt,class{i % 10},unsplit\n" for i in range(30))
        assert len(parse_manifest(HEADER + rows, check_files=False).label_names) == 10

    def test_duplicate_id_names_both_lines(self):
        text = HEADER + "a,x,y,l,train\nb,x,y,l,train\na,x,y,l,test\n"
        with pytest.raises(DataError, match=r"line 4: duplicate id 'a' \(first on line 2\)"):
            parse_manifest(text, check_files=False)

    @pytest.mark.parametrize("text,match", [
        ("id,image,text,label\na,x,y,l\n", "line 1: missing column"),
        (HEADER + "a,x,y,l,holdout\n", "line 2: split"),
        (HEADER + "a,x,y,l\n", "line 2: expected 5 fields"),
        (HEADER + ",x,y,l,train\n", "line 2: empty id"),
        ("", "empty manifest"),
    ])
    def test_parse_errors(self, text, match):
        with pytest.raises(DataError, match=match):
            parse_manifest(text, check_files=False)

    def test_unknown_label(self):
        with pytest.raises(DataError, match="line 3: unknown label 'memo'"):
            parse_manifest(HEADER + "a,x,y,letter,train\nb,x,y,memo,train\n", label_names=["letter"],
                           check_files=False)

    def test_dangling_path(self, tmp_path):
        make_pair(tmp_path, "a")
        (tmp_path / "m.csv").write_text(HEADER + "a,a.pgm,a.txt,l,train\nb,b.pgm,a.txt,l,train\n")
        with pytest.raises(DataError, match="line 3: image file not found"):
            load_manifest(tmp_path / "m.csv")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="cannot read manifest"):
            load_manifest(tmp_path / "nope.csv")

    def test_nul_byte(self):
        with pytest.raises(DataError, match="malformed CSV"):
            parse_manifest(HEADER + "a\0,x,y,l,train\n", check_files=False)

    def test_quoted_fields(self):
        m = parse_manifest(HEADER + '"a,1",x,y,"memo, internal",train\n', check_files=False)
        assert m.records[0].id == "a,1" and m.label_names == ["memo, internal"]
        assert parse_manifest(format_manifest(m), check_files=False).records == m.records

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.text(PRINTABLE, min_size=1, max_size=8), st.text(PRINTABLE, max_size=8),
                              st.sampled_from(["train", "val", "test", "unsplit"])),
                    min_size=1, max_size=10, unique_by=lambda r: r[0]))
    def test_roundtrip_is_byte_identical(self, rows):
        m = DatasetManifest([Record(i, "img/x.pgm", "txt/x.txt", l, s) for i, l, s in rows],
                            sorted({r[1] for r in rows}))
        text = format_manifest(m)
        assert format_manifest(parse_manifest(text, check_files=False)) == text

    def test_file_roundtrip(self, tmp_path):
        ds = generate_synthetic(SynthConfig(num_samples=8, seed=1), tmp_path)
        original = (tmp_path / "manifest.csv").read_bytes()
        write_manifest(load_manifest(tmp_path / "manifest.csv"), tmp_path / "again.csv")
        assert (tmp_path / "again.csv").read_bytes() == original
        assert len(ds.manifest) == 8


class TestLayout:
    def test_pairs_images_with_text(self, tmp_path):
        for label in ("email", "memo"):
            (tmp_path / "img" / label).mkdir(parents=True)
            (tmp_path / "ocr" / label).mkdir(parents=True)
            for stem in ("d1", "d2"):
                write_pgm(tmp_path / "img" / label / f"{stem}.pgm", np.zeros((4, 4), np.uint8))
                (tmp_path / "ocr" / label / f"{stem}.txt").write_text(f"{label} {stem}")
        (tmp_path / "img" / "memo" / "notes.md").write_text("ignored")
        m = manifest_from_layout(tmp_path / "img", tmp_path / "ocr", tmp_path / "out" / "m.csv")
        assert [r.id for r in m.records] == ["email/d1", "email/d2", "memo/d1", "memo/d2"]
        reloaded = load_manifest(tmp_path / "out" / "m.csv")
        assert reloaded.records[0].image == "../img/email/d1.pgm"
        assert reloaded.label_names == ["email", "memo"]

    def test_missing_text(self, tmp_path):
        (tmp_path / "img" / "memo").mkdir(parents=True)
        (tmp_path / "ocr").mkdir()
        write_pgm(tmp_path / "img" / "memo" / "a.pgm", np.zeros((4, 4), np.uint8))
        with pytest.raises(DataError, match="no OCR text"):
            manifest_from_layout(tmp_path / "img", tmp_path / "ocr", tmp_path / "m.csv")


class TestProtocols:
    def tobacco_labels(self):
        return np.repeat(np.arange(10), TOBACCO_COUNTS)

    def test_tobacco_sizes(self):
        labels = self.tobacco_labels()
        assert len(labels) == 3482
        splits = kfold_splits(labels, 10, rng=make_rng(0))
        assert len(splits) == 3
        for s in splits:
            assert len(s.train) == 800 and len(s.test) == 2682
            assert not set(s.train) & set(s.test)
            assert set(s.train) | set(s.test) == set(range(3482))

    def test_stratified_within_two(self):
        labels = self.tobacco_labels()
        for s in kfold_splits(labels, 10, rng=make_rng(1)):
            got = np.bincount(labels[s.train], minlength=10)
            proportional = np.array(TOBACCO_COUNTS) * 800 / 3482
            assert np.all(np.abs(got - proportional) <= 2)

    def test_runs_differ_and_are_seeded(self):
        labels = self.tobacco_labels()
        a = kfold_splits(labels, 10, rng=make_rng(3))
        b = kfold_splits(labels, 10, rng=make_rng(3))
        assert all(np.array_equal(x.train, y.train) for x, y in zip(a, b))
        assert not np.array_equal(a[0].train, a[1].train)

    def test_empty_class(self):
        with pytest.raises(DataError, match=r"\[1\]"):
            kfold_splits([0, 0, 2, 2], 3, train_size=2)

    def test_train_larger_than_corpus(self):
        with pytest.raises(DataError):
            kfold_splits([0, 1], 2, train_size=3)

    @given(st.lists(st.integers(1, 50), min_size=1, max_size=12), st.data())
    def test_quota_sums_and_bounds(self, counts, data):
        counts = np.array(counts)
        total = data.draw(st.integers(0, int(counts.sum())))
        quota = stratified_quota(counts, total)
        assert np.all(quota <= counts)
        assert np.all(np.abs(quota - counts * total / counts.sum()) < 1)
        assert quota.sum() == total or np.any(quota == counts)

    def test_fixed_split(self):
        rows = "".join(f"d{i},x,y,c{i % 2},{('train', 'val', 'test')[i % 3]}\n" for i in range(9))
        m = parse_manifest(HEADER + rows, check_files=False)
        [split] = protocol_splits(m, ProtocolSpec("rvl_fixed"))
        assert split.train.tolist() == [0, 3, 6] and split.val.tolist() == [1, 4, 7]
        assert not (set(split.train) & set(split.val) or set(split.val) & set(split.test))
        with pytest.raises(DataError, match="protocol allows 2"):
            protocol_splits(m, ProtocolSpec("rvl_fixed", sizes=(2, 3, 3)))

    def test_protocol_validation(self):
        with pytest.raises(ConfigError):
            ProtocolSpec("leave_one_out")
        with pytest.raises(ConfigError):
            ProtocolSpec(runs=0)


class TestLoadSample:
    def setup_manifest(self, tmp_path, text):
        make_pair(tmp_path, "a", text)
        return parse_manifest(HEADER + "a,a.pgm,a.txt,memo,train\n", tmp_path)

    def test_valid_pair(self, tmp_path):
        m = self.setup_manifest(tmp_path, "Quarterly invoice, total due")
        emb = SubwordEmbedder.random(dim=8, num_buckets=256, seed=0)
        s = load_sample(m, m.records[0], emb, 16, max_len=10)
        assert s.label == 0 and not s.missing_text
        assert s.sequence.true_length == 4 and s.sequence.matrix.shape == (8, 10)
        assert s.image.pixels.shape == (3, 16, 16) and s.image.source_size == (12, 10)

    def test_empty_text_is_flagged(self, tmp_path):
        m = self.setup_manifest(tmp_path, "")
        s = load_sample(m, m.records[0], SubwordEmbedder.random(dim=8, num_buckets=64), 16)
        assert s.missing_text and not s.sequence.matrix.any()

    def test_reload_is_identical(self, tmp_path):
        m = self.setup_manifest(tmp_path, "same bytes twice")
        emb = SubwordEmbedder.random(dim=8, num_buckets=64)
        a, b = (load_sample(m, m.records[0], emb, 16) for _ in range(2))
        assert np.array_equal(a.sequence.matrix, b.sequence.matrix)
        assert np.array_equal(a.image.pixels, b.image.pixels)

    def test_unreadable_image_names_path(self, tmp_path):
        m = self.setup_manifest(tmp_path, "x")
        (tmp_path / "a.pgm").write_bytes(b"not an image")
        with pytest.raises(DataError, match="a.pgm"):
            load_sample(m, m.records[0], SubwordEmbedder.random(dim=8, num_buckets=64), 16)


@pytest.fixture(scope="module")
def ds200(tmp_path_factory):
    return generate_synthetic(SynthConfig(num_samples=200, seed=0), tmp_path_factory.mktemp("s200"))


class TestSynthetic:
    def test_balanced_classes(self, ds200):
        assert sorted(Counter(r.label for r in ds200.manifest.records).values()) == [50] * 4
        assert Counter(r.split for r in ds200.manifest.records) == {"train": 160, "test": 40}

    def test_label_is_keyword_pattern_table(self, ds200):
        cfg = ds200.config
        for rec, kw, pat in zip(ds200.manifest.records, ds200.keyword_of, ds200.pattern_of):
            assert rec.label == f"{cfg.keywords[kw]}+{cfg.patterns[pat]}"
            tokens = tokenize((ds200.manifest.root / rec.text).read_text())
            assert cfg.keywords[kw] in tokens
            assert not set(cfg.keywords) - {cfg.keywords[kw]} & set(tokens)

    @pytest.mark.parametrize("view", ["keyword_of", "pattern_of"])
    def test_single_modality_ceiling(self, ds200, view):
        # the best any one-modality classifier can do: the majority label per observed value
        labels = ds200.manifest.labels()
        values = np.asarray(getattr(ds200, view))
        best = sum(np.bincount(labels[values == v]).max() for v in np.unique(values))
        assert best / len(labels) == 0.5

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = SynthConfig(num_samples=12, seed=5)
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 25
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        generate_synthetic(SynthConfig(num_samples=4, seed=0), tmp_path / "a")
        generate_synthetic(SynthConfig(num_samples=4, seed=1), tmp_path / "b")
        assert (tmp_path / "a/texts/s00000.txt").read_bytes() != (tmp_path / "b/texts/s00000.txt").read_bytes()

    @pytest.mark.parametrize("mode,k", [("joint", 6), ("text", 2), ("image", 3)])
    def test_num_classes(self, mode, k):
        cfg = SynthConfig(keywords=("memo", "email"), patterns=("stripes", "checker", "blobs"), mode=mode)
        assert cfg.num_classes == k == len(cfg.label_names())

    def test_image_mode_label_ignores_text(self, tmp_path):
        ds = generate_synthetic(SynthConfig(num_samples=40, mode="image", seed=0), tmp_path)
        labels = ds.manifest.labels()
        assert 0 < np.mean(np.asarray(ds.keyword_of) == labels) < 1
        assert [ds.manifest.label_names[l] for l in labels] == [ds.config.patterns[p] for p in ds.pattern_of]

    @pytest.mark.parametrize("kwargs", [dict(mode="pairs"), dict(patterns=("zigzag",)), dict(keywords=("a", "a")),
                                        dict(num_samples=3), dict(doc_length=(5, 2)), dict(image_size=4)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            SynthConfig(**kwargs)

    def test_unwritable_output(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(DataError):
            generate_synthetic(SynthConfig(num_samples=4), tmp_path / "file" / "sub")

    @pytest.mark.parametrize("pattern", ["stripes", "checker", "blobs"])
    def test_images_decode(self, tmp_path, pattern):
        raster = synth_image(pattern, 24, 0.1, make_rng(0))
        assert raster.dtype == np.uint8 and raster.shape == (24, 24) and raster.std() > 10
        write_pgm(tmp_path / "p.pgm", raster)
        assert np.array_equal(read_raster(tmp_path / "p.pgm"), raster)

    def test_filler_vocabulary(self):
        words = filler_words()
        assert len(words) == len(set(words)) == 1000
        assert not {"invoice", "letter"} & set(words)

    @given(st.text(alphabet="abcdefghij", min_size=2, max_size=12), st.integers(0, 2**32 - 1))
    def test_misspell_is_one_edit(self, word, seed):
        out = misspell(word, make_rng(seed))
        assert abs(len(out) - len(word)) <= 1
        assert sum(a != b for a, b in zip(out, word)) <= 2 or len(out) != len(word)
