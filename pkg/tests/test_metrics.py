import itertools

import numpy as np
import pytest

from grounder.metrics import (
    AR_THRESHOLDS,
    AlignmentError,
    GtMask,
    LabeledMasks,
    NounGrounding,
    ScoredMask,
    average_recall,
    mask_ap,
    mask_iou,
    noun_extraction_recall,
    panoptic_quality,
)


def strip_mask(width, start, end):
    m = np.zeros((1, width), dtype=bool)
    m[0, start:end] = True
    return m


class TestMaskIoU:
    def test_identical(self):
        m = strip_mask(10, 2, 7)
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        assert mask_iou(strip_mask(10, 0, 3), strip_mask(10, 5, 8)) == 0.0

    def test_half_overlap_third(self):
        # |a| = |b| = 4, overlap 2 -> IoU = 2/6 = 1/3
        a = strip_mask(12, 0, 4)
        b = strip_mask(12, 2, 6)
        assert mask_iou(a, b) == pytest.approx(1 / 3)

    def test_both_empty_is_zero(self):
        z = np.zeros((4, 4), dtype=bool)
        assert mask_iou(z, z) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_iou(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))


def random_labeled_scene(rng, n_entities, labels=("a", "b", "c"), hw=(12, 12)):
    grid = rng.integers(0, n_entities + 1, size=hw)
    masks, names = [], []
    for k in range(n_entities):
        mask = grid == k + 1
        if mask.any():
            masks.append(mask)
            names.append(str(rng.choice(labels)))
    if not masks:
        masks = np.zeros((0,) + hw, dtype=bool)
        return LabeledMasks(masks, [])
    return LabeledMasks(np.stack(masks), names)


def brute_force_pq(pred: LabeledMasks, gt: LabeledMasks):
    """Enumerate all label-consistent one-to-one pairings; keep IoU>0.5 pairs,
    maximize count then total IoU."""
    np_, ng = pred.masks.shape[0], gt.masks.shape[0]
    candidates = [
        (i, j, mask_iou(pred.masks[i], gt.masks[j]))
        for i in range(np_)
        for j in range(ng)
        if pred.labels[i] == gt.labels[j]
    ]
    candidates = [(i, j, iou) for i, j, iou in candidates if iou > 0.5]
    best = (0, 0.0, [])
    for r in range(len(candidates) + 1):
        for combo in itertools.combinations(candidates, r):
            if len({c[0] for c in combo}) != r or len({c[1] for c in combo}) != r:
                continue
            total = sum(c[2] for c in combo)
            if (r, total) > (best[0], best[1]):
                best = (r, total, list(combo))
    tp = best[0]
    iou_sum = best[1]
    fp = np_ - tp
    fn = ng - tp
    sq = iou_sum / tp if tp else 0.0
    denom = tp + 0.5 * fp + 0.5 * fn
    rq = tp / denom if denom else 0.0
    return sq * rq, sq, rq, tp, fp, fn


class TestPanopticQuality:
    def test_identical_is_one(self):
        rng = np.random.default_rng(0)
        scene = random_labeled_scene(rng, 4)
        res = panoptic_quality(scene, scene)
        assert res.pq == res.sq == res.rq == 1.0

    def test_single_match_point_six(self):
        # One pred matched at IoU 0.6, no FPs/FNs.
        gt = LabeledMasks(strip_mask(10, 0, 5)[None], ["x"])
        pred = LabeledMasks(strip_mask(10, 0, 3)[None], ["x"])  # IoU 3/5 = 0.6
        res = panoptic_quality(pred, gt)
        assert res.sq == pytest.approx(0.6)
        assert res.rq == pytest.approx(1.0)
        assert res.pq == pytest.approx(0.6)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            pred = random_labeled_scene(rng, int(rng.integers(1, 6)))
            gt = random_labeled_scene(rng, int(rng.integers(1, 6)))
            res = panoptic_quality(pred, gt)
            pq, sq, rq, tp, fp, fn = brute_force_pq(pred, gt)
            assert res.tp == tp and res.fp == fp and res.fn == fn
            assert res.pq == pytest.approx(pq, abs=1e-9)
            assert res.sq == pytest.approx(sq, abs=1e-9)

    def test_pq_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pred = random_labeled_scene(rng, 4)
            gt = random_labeled_scene(rng, 4)
            res = panoptic_quality(pred, gt)
            if res.tp > 0:
                assert abs(res.pq - res.sq * res.rq) < 1e-9

    def test_order_invariance(self):
        rng = np.random.default_rng(12)
        pred = random_labeled_scene(rng, 5)
        gt = random_labeled_scene(rng, 5)
        perm = np.random.default_rng(1).permutation(pred.masks.shape[0])
        shuffled = LabeledMasks(pred.masks[perm], [pred.labels[i] for i in perm])
        a, b = panoptic_quality(pred, gt), panoptic_quality(shuffled, gt)
        assert a.pq == pytest.approx(b.pq) and a.tp == b.tp


class TestAverageRecall:
    def make(self, noun, mask, thing=True, plural=False):
        return NounGrounding(noun, mask, thing, plural)

    def test_perfect_grounding(self):
        gt = [self.make("a", strip_mask(10, 0, 4)), self.make("b", strip_mask(10, 5, 9), thing=False, plural=True)]
        res = average_recall(gt, gt)
        assert res.ar == 1.0
        assert res.ar_things == res.ar_stuff == res.ar_singular == res.ar_plural == 1.0

    def test_empty_predictions(self):
        gt = [self.make("a", strip_mask(10, 0, 4))]
        pred = [self.make("a", np.zeros((1, 10), dtype=bool))]
        assert average_recall(pred, gt).ar == 0.0

    def test_iou_half_gives_half(self):
        # inter 1, union 2 -> IoU exactly 0.5 -> AR 0.50 on the 100-point grid.
        gt = [self.make("a", strip_mask(10, 0, 2))]
        pred = [self.make("a", strip_mask(10, 0, 1))]
        assert average_recall(pred, gt).ar == pytest.approx(0.50)

    def test_splits_partition(self):
        gt = [
            self.make("t_sing", strip_mask(10, 0, 2), thing=True, plural=False),
            self.make("s_plur", strip_mask(10, 3, 6), thing=False, plural=True),
        ]
        pred = [self.make("t_sing", strip_mask(10, 0, 2)), self.make("s_plur", np.zeros((1, 10), dtype=bool))]
        res = average_recall(pred, gt)
        assert res.ar_things == 1.0
        assert res.ar_stuff == 0.0
        assert res.ar_singular == 1.0
        assert res.ar_plural == 0.0
        assert res.ar == pytest.approx(0.5)

    def test_alignment_error(self):
        gt = [self.make("a", strip_mask(4, 0, 2))]
        pred = [self.make("b", strip_mask(4, 0, 2))]
        with pytest.raises(AlignmentError):
            average_recall(pred, gt)

    def test_monotone_in_single_iou(self):
        # Improving one noun's IoU never decreases AR.
        gt_mask = strip_mask(50, 0, 40)
        gt = [self.make("a", gt_mask), self.make("b", strip_mask(50, 41, 50))]
        last = -1.0
        for cover in range(0, 41, 5):
            pred = [self.make("a", strip_mask(50, 0, cover)), self.make("b", strip_mask(50, 41, 46))]
            ar = average_recall(pred, gt).ar
            assert ar >= last
            last = ar

    def test_grid_is_hundred_points(self):
        assert len(AR_THRESHOLDS) == 100
        assert AR_THRESHOLDS[0] == 0.0 and AR_THRESHOLDS[-1] == 0.99


def reference_ap(preds, gts, threshold):
    """Independent straightforward PR-curve implementation."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    taken = set()
    flags = []
    for i in order:
        best, best_iou = None, threshold
        for j, g in enumerate(gts):
            if j in taken or preds[i].image_id != g.image_id:
                continue
            iou = mask_iou(preds[i].mask, g.mask)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best is not None:
            taken.add(best)
            flags.append(True)
        else:
            flags.append(False)
    # PR points, then exact area under the precision envelope by scanning
    # max precision at recall >= r over the distinct recall levels.
    tp = 0
    points = []
    for k, hit in enumerate(flags, start=1):
        tp += int(hit)
        points.append((tp / len(gts), tp / k))
    area = 0.0
    prev_r = 0.0
    for r in sorted({p[0] for p in points}):
        if r == prev_r:
            continue
        p_max = max(p for rr, p in points if rr >= r)
        area += (r - prev_r) * p_max
        prev_r = r
    return area


class TestMaskAP:
    def test_identical_preds(self):
        rng = np.random.default_rng(2)
        gts, preds = [], []
        for img in range(3):
            scene = random_labeled_scene(rng, 3)
            for m in scene.masks:
                gts.append(GtMask(img, m))
                preds.append(ScoredMask(img, 1.0, m))
        res = mask_ap(preds, gts)
        assert res["AP"] == res["AP50"] == res["AP75"] == 1.0

    def test_no_predictions(self):
        gts = [GtMask(0, strip_mask(8, 0, 4))]
        res = mask_ap([], gts)
        assert res["AP"] == 0.0

    def test_matches_reference(self):
        rng = np.random.default_rng(5)
        gts, preds = [], []
        for img in range(5):
            scene = random_labeled_scene(rng, 3)
            for k, m in enumerate(scene.masks):
                gts.append(GtMask(img, m))
                mask = m.copy()
                if k == 0:  # deliberately shift one prediction
                    mask = np.roll(mask, 2, axis=1)
                preds.append(ScoredMask(img, float(rng.random()), mask))
        res = mask_ap(preds, gts)
        for t, key in ((0.5, "AP50"), (0.75, "AP75")):
            assert res[key] == pytest.approx(reference_ap(preds, gts, t), abs=1e-6)

    def test_confidence_swap_monotonicity(self):
        gt_mask = strip_mask(10, 0, 5)
        wrong = strip_mask(10, 6, 9)
        gts = [GtMask(0, gt_mask)]
        good_first = [ScoredMask(0, 0.9, gt_mask), ScoredMask(0, 0.1, wrong)]
        bad_first = [ScoredMask(0, 0.1, gt_mask), ScoredMask(0, 0.9, wrong)]
        assert mask_ap(bad_first, gts)["AP"] <= mask_ap(good_first, gts)["AP"]


class TestNounExtractionRecall:
    def test_all_found(self):
        toks = "There are two semantic nouns , including red circle <SEG> and gray background <SEG> .".split()
        assert noun_extraction_recall(toks, ["red circle", "gray background"]) == 1.0

    def test_no_seg_tokens(self):
        toks = "red circle and gray background".split()
        assert noun_extraction_recall(toks, ["red circle"]) == 0.0

    def test_three_of_four(self):
        toks = "a <SEG> b <SEG> c <SEG>".split()
        assert noun_extraction_recall(toks, ["a", "b", "c", "d"]) == 0.75

    def test_seg_not_double_counted(self):
        toks = "red circle <SEG>".split()
        assert noun_extraction_recall(toks, ["circle", "red circle"]) == 0.5
