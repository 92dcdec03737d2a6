import os
import random
import threading
import time

import pytest

import lsmkv.manifest as mf
from lsmkv.errors import CorruptionError
from lsmkv.io_engine import IoEngine
from lsmkv.ledger import (
    DurabilityLedger,
    PENDING,
    RETIRED,
    check_durable_ancestry,
    resolve_on_recovery,
)
from lsmkv.metrics import EngineMetrics
from lsmkv.model import (
    Durability,
    InternalKey,
    KVRecord,
    RecordKind,
    SstMeta,
    sst_filename,
)
from lsmkv.sstable import build_sst, open_sst
from lsmkv.version import VersionSet, replay_manifest


class Harness:
    """Real files, real io engine, version set, ledger, a delete recorder."""

    def __init__(self, root, backend="async", **io_kw):
        self.root = str(root)
        self.io = IoEngine(backend, **io_kw)
        self.vs = VersionSet(self.root)
        self.vs.writer = mf.ManifestWriter(os.path.join(self.root, "MANIFEST"))
        self.metrics = EngineMetrics()
        self.deleted: list[int] = []
        self.ledger = DurabilityLedger(
            self.io,
            self.vs,
            self.metrics,
            sst_path=self.sst_path,
            delete_file=self.delete_file,
        )
        self._next_fid = 1
        self._next_epoch = 1

    def sst_path(self, fid):
        return os.path.join(self.root, sst_filename(fid))

    def delete_file(self, fid):
        self.deleted.append(fid)
        try:
            os.unlink(self.sst_path(fid))
        except FileNotFoundError:
            pass

    def make_table(self, level, keys, *, durable=True, seq_base=None):
        fid = self._next_fid
        self._next_fid += 1
        seq_base = seq_base or fid * 1000
        records = [
            KVRecord(InternalKey(k, seq_base + i, RecordKind.PUT), b"v-" + k)
            for i, k in enumerate(sorted(keys))
        ]
        meta, ids, f = build_sst(
            iter(records), self.io, self.sst_path(fid), fid, level,
            buffer_size=4096, target_size=1 << 30,
        )
        self.io.wait_all([self.io.submit_fsync(f)])
        self.io.close(f)
        meta.durability = (
            Durability.DURABLE if durable else Durability.VOLATILE
        )
        self.vs.apply_group([mf.AddFile(meta)])
        return meta

    def run_compaction_like(self, parent_metas, out_level, out_keys_lists,
                            complete_batch=True):
        """Create offspring tables + ledger entry the way a compaction does."""
        epoch = self._next_epoch
        self._next_epoch += 1
        offspring, handles = [], []
        for keys in out_keys_lists:
            fid = self._next_fid
            self._next_fid += 1
            records = [
                KVRecord(
                    InternalKey(k, 100000 + epoch * 100 + i, RecordKind.PUT),
                    b"o-" + k,
                )
                for i, k in enumerate(sorted(keys))
            ]
            meta, ids, f = build_sst(
                iter(records), self.io, self.sst_path(fid), fid, out_level,
                buffer_size=4096, target_size=1 << 30, birth_epoch=epoch,
                async_mode=True,
            )
            self.io.wait_all(ids)
            offspring.append(meta)
            handles.append(f)
        batch = self.io.submit_fsync_batch(handles)
        self.ledger.open_entry(
            epoch, parent_metas, offspring, batch, handles=handles
        )
        if complete_batch:
            while not self.io.is_complete(batch):
                time.sleep(0.001)
        return epoch, offspring

    def close(self):
        self.vs.close()
        self.io.shutdown()


@pytest.fixture
def h(tmp_path):
    harness = Harness(tmp_path)
    yield harness
    harness.close()


def test_checkup_on_durable_inputs_is_metadata_only(h):
    m1 = h.make_table(0, [b"a", b"b"])
    m2 = h.make_table(0, [b"c"])
    before = h.io.submitted_count
    assert h.ledger.checkup([m1, m2]) == []
    # already-durable epoch: pure metadata, no I/O submitted
    assert h.io.submitted_count == before
    assert h.deleted == []


def test_fig5_timeline_checkup_retires_first_compaction(h):
    """Two chained compactions: the second retires the first's parents."""
    l0_a = h.make_table(0, [b"a", b"m"])      # L0(0)
    l0_b = h.make_table(0, [b"b", b"n"])      # L0(1)
    l1_c = h.make_table(1, [b"c"])            # L1(2)
    epoch1, offspring1 = h.run_compaction_like(
        [l0_a, l0_b, l1_c], 1, [[b"a", b"b"], [b"c", b"m"], [b"n"]]
    )  # -> L1(3), L1(4), L1(5)
    assert {e.epoch for e in h.ledger.open_entries()} == {epoch1}

    # compaction 2 consumes L1(4), L1(5): check-up retires epoch1 and deletes
    # exactly the three original parents
    retired = h.ledger.checkup([offspring1[1], offspring1[2]])
    assert retired == [epoch1]
    assert sorted(h.deleted) == sorted(
        [l0_a.file_id, l0_b.file_id, l1_c.file_id]
    )
    for m in offspring1:
        assert h.vs.meta(m.file_id).durability == Durability.DURABLE
    assert h.ledger.entries[epoch1].state == RETIRED


def test_checkup_idempotent_per_epoch(h):
    parents = [h.make_table(0, [b"a"]), h.make_table(0, [b"b"])]
    epoch, offspring = h.run_compaction_like(parents, 1, [[b"a"], [b"b"]])
    # two volatile inputs from the same epoch -> exactly one retirement
    retired = h.ledger.checkup(offspring)
    assert retired == [epoch]
    assert h.ledger.checkup(offspring) == []
    assert h.deleted.count(parents[0].file_id) == 1


def test_checkup_blocks_on_pending_batch_and_counts_fallback(tmp_path):
    h = Harness(tmp_path, backend="sim", sim_fsync_latency_us=60_000.0)
    try:
        parents = [h.make_table(0, [b"a"])]
        t0 = time.monotonic()
        epoch, offspring = h.run_compaction_like(
            parents, 1, [[b"a"]], complete_batch=False
        )
        retired = h.ledger.checkup(offspring)
        elapsed = time.monotonic() - t0
        assert retired == [epoch]
        assert elapsed >= 0.055  # had to wait out the simulated fsync
        assert h.metrics.fallback_fsync_waits == 1
    finally:
        h.close()


def test_checkup_ready_defers_pending_batch(tmp_path):
    h = Harness(tmp_path, backend="sim", sim_fsync_latency_us=50_000.0)
    try:
        parents = [h.make_table(0, [b"a"])]
        epoch, offspring = h.run_compaction_like(
            parents, 1, [[b"a"]], complete_batch=False
        )
        assert h.ledger.checkup_ready(offspring) == []
        assert h.metrics.fallback_fsync_waits == 0
        assert h.ledger.entries[epoch].state == PENDING
        assert h.deleted == []  # parents untouched while batch pending
        while not h.io.is_complete(h.ledger.entries[epoch].fsync_batch_id):
            time.sleep(0.005)
        assert h.ledger.checkup_ready(offspring) == [epoch]
    finally:
        h.close()


def test_transitive_retirement_ancestors_first(h):
    """Offspring of a pending epoch may be consumed; retiring the consumer
    forces the ancestor epoch first."""
    l0 = [h.make_table(0, [b"a"]), h.make_table(0, [b"b"])]
    epoch1, off1 = h.run_compaction_like(l0, 1, [[b"a", b"b"]])
    # consume epoch1's offspring before retiring epoch1
    epoch2, off2 = h.run_compaction_like(off1, 2, [[b"a"], [b"b"]])
    retired = h.ledger.checkup(off2)
    assert set(retired) >= {epoch2}
    assert h.ledger.entries[epoch1].state == RETIRED
    assert h.ledger.entries[epoch2].state == RETIRED
    # ancestor parents (l0 files) and epoch2 parents (off1) all deleted
    assert set(h.deleted) == {m.file_id for m in l0} | {
        m.file_id for m in off1
    }


def test_outlier_sweep_cases(h):
    assert h.ledger.outlier_sweep(max_age=0.0) == []  # no pending entries

    parents = [h.make_table(0, [b"x"])]
    epoch, _ = h.run_compaction_like(parents, 1, [[b"x"]])
    # young entry is left alone, old entry retires
    assert h.ledger.outlier_sweep(max_age=3600.0) == []
    assert h.ledger.outlier_sweep(max_age=0.0) == [epoch]
    assert h.deleted == [parents[0].file_id]


def test_sweep_race_with_checkup_single_retirement(h):
    parents = [h.make_table(0, [b"r"])]
    epoch, offspring = h.run_compaction_like(parents, 1, [[b"r"]])
    results = []

    def do_checkup():
        results.append(("checkup", h.ledger.checkup(offspring)))

    def do_sweep():
        results.append(("sweep", h.ledger.outlier_sweep(0.0)))

    ts = [threading.Thread(target=do_checkup), threading.Thread(target=do_sweep)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    total = [e for _, lst in results for e in lst]
    assert total == [epoch]  # exactly one retirement between the two
    assert h.deleted.count(parents[0].file_id) == 1


def test_retry_fsync_transient_failure(h):
    parents = [h.make_table(0, [b"f"])]
    epoch, offspring = h.run_compaction_like(
        parents, 1, [[b"f"]], complete_batch=False
    )
    entry = h.ledger.entries[epoch]
    # fail the batch fsync once; the retry path must repair and retire
    h.io.inject_fault(h.sst_path(offspring[0].file_id), "fsync", times=1)
    retired = h.ledger.checkup(offspring)
    assert retired == [epoch]
    assert entry.state == RETIRED
    assert h.deleted == [parents[0].file_id]


def test_retry_fsync_rebuild_from_parents(h):
    parents = [h.make_table(0, [b"g", b"h"])]
    epoch, offspring = h.run_compaction_like(
        parents, 1, [[b"g", b"h"]], complete_batch=False
    )
    bad_path = h.sst_path(offspring[0].file_id)
    # batch fails AND the one-shot re-fsync fails: forces a rebuild
    h.io.inject_fault(bad_path, "fsync", times=2)
    retired = h.ledger.checkup(offspring)
    assert retired == [epoch]
    rebuilt = open_sst(bad_path)
    assert rebuilt.verify_content()
    assert rebuilt.footer_crc == offspring[0].checksum
    rebuilt.close()
    assert h.deleted == [parents[0].file_id]


def test_deletion_safety_under_randomized_schedules(tmp_path):
    """No parent is ever deleted before its offspring batch completed OK."""
    for seed in range(30):
        rnd = random.Random(seed)
        root = tmp_path / f"fz{seed}"
        root.mkdir()
        h = Harness(
            root, backend="sim",
            sim_fsync_latency_us=rnd.choice([0.0, 2000.0, 20_000.0]),
        )
        try:
            batches = {}
            live_parents = [h.make_table(0, [b"%02d" % i]) for i in range(3)]
            epochs = []
            for step in range(rnd.randrange(2, 5)):
                parents = live_parents
                epoch, offspring = h.run_compaction_like(
                    parents, step + 1,
                    [[b"%02d" % i for i in range(3)]],
                    complete_batch=rnd.random() < 0.3,
                )
                batches[epoch] = h.ledger.entries[epoch].fsync_batch_id
                epochs.append(epoch)
                live_parents = offspring
                # random interleave of sweeps and checkups
                for _ in range(rnd.randrange(0, 3)):
                    action = rnd.random()
                    if action < 0.45:
                        h.ledger.checkup_ready(offspring)
                    elif action < 0.8:
                        h.ledger.outlier_sweep(
                            max_age=rnd.choice([0.0, 3600.0])
                        )
                    else:
                        h.ledger.checkup(offspring)
                # invariant at quiescent point: deleted files belong to
                # epochs whose batch completed ok
                for fid in h.deleted:
                    owner = next(
                        e for e in h.ledger.entries.values() if fid in e.parents
                    )
                    assert owner.batch_event is not None and owner.batch_event.ok
            h.ledger.force_retire_all()
            for e in h.ledger.entries.values():
                assert e.state == RETIRED
        finally:
            h.close()


def test_durable_ancestry_checker(h, tmp_path):
    parents = [h.make_table(0, [b"a"])]
    epoch, offspring = h.run_compaction_like(
        parents, 1, [[b"a"]], complete_batch=False
    )
    check_durable_ancestry(h.vs, h.ledger, str(tmp_path))  # volatile but chained
    # breaking the chain must trip the checker
    os.unlink(h.sst_path(parents[0].file_id))
    with pytest.raises(AssertionError):
        check_durable_ancestry(h.vs, h.ledger, str(tmp_path))


class TestRecoveryResolution:
    def _replay(self, root):
        return replay_manifest(str(root), os.path.join(str(root), "MANIFEST"))

    def test_clean_shutdown_has_no_open_entries(self, tmp_path):
        h = Harness(tmp_path)
        parents = [h.make_table(0, [b"a"])]
        h.run_compaction_like(parents, 1, [[b"a"]])
        h.ledger.force_retire_all()
        h.close()
        vs, ledger_edits = self._replay(tmp_path)
        vs.writer = mf.ManifestWriter(os.path.join(str(tmp_path), "MANIFEST"))
        report = resolve_on_recovery(
            vs, ledger_edits, lambda fid: os.path.join(str(tmp_path), sst_filename(fid))
        )
        assert report == {"retired": [], "aborted": [], "orphans_dropped": []}
        vs.close()

    def test_valid_offspring_retire_on_recovery(self, tmp_path):
        h = Harness(tmp_path)
        parents = [h.make_table(0, [b"a", b"b"])]
        epoch, offspring = h.run_compaction_like(parents, 1, [[b"a", b"b"]])
        h.close()  # crash before any checkup: entry still open

        vs, ledger_edits = self._replay(tmp_path)
        vs.writer = mf.ManifestWriter(os.path.join(str(tmp_path), "MANIFEST"))
        sst_path = lambda fid: os.path.join(str(tmp_path), sst_filename(fid))
        report = resolve_on_recovery(vs, ledger_edits, sst_path)
        assert report["retired"] == [epoch]
        assert not os.path.exists(sst_path(parents[0].file_id))
        assert vs.meta(offspring[0].file_id).durability == Durability.DURABLE

    def test_invalid_offspring_aborts_and_restores_parents(self, tmp_path):
        h = Harness(tmp_path)
        parents = [h.make_table(0, [b"a", b"b"])]
        epoch, offspring = h.run_compaction_like(parents, 1, [[b"a", b"b"]])
        bad = h.sst_path(offspring[0].file_id)
        h.close()
        # simulate lost writeback: truncate the offspring file
        with open(bad, "r+b") as f:
            f.truncate(10)

        vs, ledger_edits = self._replay(tmp_path)
        vs.writer = mf.ManifestWriter(os.path.join(str(tmp_path), "MANIFEST"))
        sst_path = lambda fid: os.path.join(str(tmp_path), sst_filename(fid))
        report = resolve_on_recovery(vs, ledger_edits, sst_path)
        assert report["aborted"] == [epoch]
        live = {m.file_id for m in vs.current.all_files()}
        assert parents[0].file_id in live
        assert offspring[0].file_id not in live
        assert not os.path.exists(bad)
        assert os.path.exists(sst_path(parents[0].file_id))

    def test_chained_aborts_use_restored_grandparents(self, tmp_path):
        h = Harness(tmp_path)
        l0 = [h.make_table(0, [b"a"])]
        e1, off1 = h.run_compaction_like(l0, 1, [[b"a"]])
        e2, off2 = h.run_compaction_like(off1, 2, [[b"a"]])
        h.close()
        # both offspring generations invalid
        for m in off1 + off2:
            with open(h.sst_path(m.file_id), "r+b") as f:
                f.truncate(4)

        vs, ledger_edits = self._replay(tmp_path)
        vs.writer = mf.ManifestWriter(os.path.join(str(tmp_path), "MANIFEST"))
        sst_path = lambda fid: os.path.join(str(tmp_path), sst_filename(fid))
        report = resolve_on_recovery(vs, ledger_edits, sst_path)
        assert set(report["aborted"]) == {e1, e2}
        live = {m.file_id for m in vs.current.all_files()}
        assert live == {l0[0].file_id}

    def test_missing_parent_with_invalid_offspring_is_corruption(self, tmp_path):
        h = Harness(tmp_path)
        parents = [h.make_table(0, [b"a"])]
        epoch, offspring = h.run_compaction_like(parents, 1, [[b"a"]])
        h.close()
        with open(h.sst_path(offspring[0].file_id), "r+b") as f:
            f.truncate(4)
        os.unlink(h.sst_path(parents[0].file_id))

        vs, ledger_edits = self._replay(tmp_path)
        vs.writer = mf.ManifestWriter(os.path.join(str(tmp_path), "MANIFEST"))
        with pytest.raises(CorruptionError):
            resolve_on_recovery(
                vs,
                ledger_edits,
                lambda fid: os.path.join(str(tmp_path), sst_filename(fid)),
            )
