import pytest

from helpers import build_plan, make_partition, make_schedule
from pipecraft.comms import check_deadlock_free, infer_comms, insert_deletions
from pipecraft.gantt import render_svg
from pipecraft.simulator import (
    CostModel,
    SimError,
    SimMemoryError,
    ideal_bubble_fraction,
    peak_memory_comparison,
    remat_overhead,
    simulate,
    sweep,
)
from pipecraft.taskgraph import infer_outer_placement, unroll

UNIFORM = CostModel(uniform_task_s=1.0, bwd_cost_multiplier=1.0)


def plan(family, P, M, V=1, layers=None, width=4):
    L = layers or P * V
    p = make_partition(layers=L, width=width, yield_every=max(1, L // (P * V)))
    tg, cp = build_plan(p, make_schedule(family, P, M, V))
    return p, tg, cp


class TestBubble:
    def test_single_actor_no_bubble(self):
        _, tg, cp = plan("gpipe", 1, 5)
        assert simulate(cp, tg, UNIFORM).bubble_fraction == 0.0

    @pytest.mark.parametrize("P,M", [(2, 4), (4, 8), (4, 16)])
    def test_gpipe_equals_1f1b_under_uniform_costs(self, P, M):
        reports = {}
        for fam in ("gpipe", "1f1b"):
            _, tg, cp = plan(fam, P, M)
            reports[fam] = simulate(cp, tg, UNIFORM)
        assert reports["gpipe"].step_time_s == pytest.approx(reports["1f1b"].step_time_s)
        want = ideal_bubble_fraction(P, M)
        for rep in reports.values():
            assert rep.bubble_fraction == pytest.approx(want, abs=1e-9)

    @pytest.mark.parametrize("V", [1, 2, 4])
    def test_interleaving_shrinks_bubble(self, V):
        _, tg, cp = plan("interleaved", 4, 8, V)
        rep = simulate(cp, tg, CostModel(uniform_task_s=1.0 / V, bwd_cost_multiplier=1.0))
        assert rep.bubble_fraction == pytest.approx(ideal_bubble_fraction(4, 8, V), abs=1e-9)

    def test_deep_interleaving_configuration(self):
        # Eight actors with a circular repeat of six: 48 stages.
        _, tg, cp = plan("interleaved", 8, 32, 6, layers=48)
        rep = simulate(cp, tg, UNIFORM)
        want = ideal_bubble_fraction(8, 32, 6)
        assert abs(rep.bubble_fraction - want) / want < 0.02

    def test_busy_plus_idle_spans_window(self):
        _, tg, cp = plan("1f1b", 4, 8)
        rep = simulate(cp, tg, UNIFORM)
        span = rep.window[1] - rep.window[0]
        for b, i in zip(rep.busy_s, rep.idle_s):
            assert b + i == pytest.approx(span)

    def test_conservation_of_work(self):
        cm = CostModel(flops_per_second=1e6)
        totals = []
        for fam in ("gpipe", "1f1b"):
            _, tg, cp = plan(fam, 2, 4, layers=2)
            rep = simulate(cp, tg, cm)
            expected = sum(t.flops for t in tg.tasks.values()) / 1e6
            assert sum(rep.run_busy_s) == pytest.approx(expected)
            totals.append(sum(rep.run_busy_s))
        assert totals[0] == pytest.approx(totals[1])


class TestDependencies:
    def test_no_instruction_precedes_its_inputs(self):
        _, tg, cp = plan("interleaved", 2, 4, 2)
        cm = CostModel(uniform_task_s=1.0, link_latency_s=0.3,
                       link_bytes_per_second=1e6)
        rep = simulate(cp, tg, cm)
        comm_by_label = {}
        for e in rep.events:
            if e.kind == "comm":
                comm_by_label.setdefault(e.label.split("->")[0], []).append(e)
        runs = {e.label: e for e in rep.events if e.kind != "comm"}
        for uid, t in tg.tasks.items():
            for bid in t.consumes:
                buf = tg.buffers[bid]
                if buf.producer is not None and tg.tasks[buf.producer].actor != t.actor:
                    arrivals = comm_by_label.get(bid)
                    assert arrivals, bid
                    assert runs[uid].start >= max(a.end for a in arrivals) - 1e-9

    def test_refuses_unsafe_plan(self):
        from helpers import crossing_schedule
        from pipecraft.comms import naive_lowering
        p = make_partition(layers=4)
        s = crossing_schedule()
        tg = infer_outer_placement(unroll(p, s), p)
        bad = naive_lowering(tg, s)
        with pytest.raises(SimError):
            simulate(bad, tg, UNIFORM)


class TestMemory:
    def test_peak_stash_counts_gpipe_vs_1f1b(self):
        def plan_for(name):
            _, tg, cp = plan(name, 4, 8)
            return cp, tg

        table = peak_memory_comparison(plan_for, 4, 8)
        assert table["gpipe"]["peak_stash_count"] == 8
        assert table["1f1b"]["peak_stash_count"] == 4
        assert table["reduction"] == pytest.approx(2.0)

    def test_m_equals_p_boundary(self):
        def plan_for(name):
            _, tg, cp = plan(name, 4, 4)
            return cp, tg

        table = peak_memory_comparison(plan_for, 4, 4)
        assert table["gpipe"]["peak_stash_count"] == table["1f1b"]["peak_stash_count"] == 4

    def test_deletions_lower_peak_memory(self):
        p = make_partition(layers=2)
        s = make_schedule("1f1b", 2, 4)
        tg = infer_outer_placement(unroll(p, s), p)
        cp = infer_comms(tg, s)
        assert check_deadlock_free(cp).ok
        without = simulate(cp, tg, UNIFORM)
        withdel = simulate(insert_deletions(cp, tg), tg, UNIFORM)
        for a in range(2):
            assert withdel.peak_mem_bytes[a] <= without.peak_mem_bytes[a]
        assert max(withdel.peak_mem_bytes) < max(without.peak_mem_bytes)

    def test_capacity_error_prompts_remat(self):
        _, tg, cp = plan("gpipe", 2, 8, layers=2, width=8)
        free = simulate(cp, tg, CostModel())
        cap = max(free.peak_mem_bytes) - 1
        with pytest.raises(SimMemoryError, match="remat"):
            simulate(cp, tg, CostModel(mem_capacity_bytes=cap))

    def test_peaks_deterministic(self):
        _, tg, cp = plan("1f1b", 2, 4)
        a = simulate(cp, tg, UNIFORM)
        b = simulate(cp, tg, UNIFORM)
        assert a.peak_mem_bytes == b.peak_mem_bytes
        assert a.to_json_str() == b.to_json_str()


class TestRemat:
    def test_ratio_is_four_thirds_without_bubbles(self):
        _, tg, cp = plan("gpipe", 1, 4)
        cm = CostModel(uniform_task_s=1.0, bwd_cost_multiplier=2.0)
        out = remat_overhead(cp, tg, cm)
        assert out["ratio"] == pytest.approx(4.0 / 3.0, abs=1e-9)

    def test_no_remat_ratio_is_one(self):
        _, tg, cp = plan("gpipe", 1, 4)
        cm = CostModel(uniform_task_s=1.0, bwd_cost_multiplier=2.0,
                       remat_policy="none")
        rep1 = simulate(cp, tg, cm)
        rep2 = simulate(cp, tg, cm)
        assert rep1.step_time_s == rep2.step_time_s

    def test_remat_shrinks_stash_memory(self):
        _, tg, cp = plan("gpipe", 2, 8, layers=2, width=8)
        base = simulate(cp, tg, CostModel())
        full = simulate(cp, tg, CostModel(remat_policy="full-per-stage"))
        assert max(full.peak_mem_bytes) < max(base.peak_mem_bytes)

    def test_memory_capped_gpipe_slower_than_1f1b(self):
        # Capacity chosen so GPipe must rematerialize while 1F1B runs without.
        _, tg_g, cp_g = plan("gpipe", 4, 8, layers=4, width=8)
        _, tg_o, cp_o = plan("1f1b", 4, 8, layers=4, width=8)
        cm = CostModel(uniform_task_s=1.0, bwd_cost_multiplier=2.0)
        peak_g = max(simulate(cp_g, tg_g, cm).peak_mem_bytes)
        peak_o = max(simulate(cp_o, tg_o, cm).peak_mem_bytes)
        peak_g_remat = max(simulate(cp_g, tg_g,
                                    cm.replaced(remat_policy="full-per-stage")).peak_mem_bytes)
        assert peak_o < peak_g
        cap = (max(peak_o, peak_g_remat) + peak_g) / 2
        with pytest.raises(SimMemoryError):
            simulate(cp_g, tg_g, cm.replaced(mem_capacity_bytes=cap))
        t_gpipe = simulate(cp_g, tg_g, cm.replaced(mem_capacity_bytes=cap,
                                                   remat_policy="full-per-stage")).step_time_s
        t_1f1b = simulate(cp_o, tg_o, cm.replaced(mem_capacity_bytes=cap)).step_time_s
        assert t_gpipe > t_1f1b


class TestSweep:
    def grid_times(self, d):
        times = {}
        for V in (1, 2, 3, 4, 6, 12):
            L, P, M = 48, 4, 8
            p = make_partition(layers=L, width=4, yield_every=L // (P * V))
            tg, cp = build_plan(p, make_schedule("interleaved", P, M, V))
            cm = CostModel(uniform_task_s=1.0 / V, bwd_cost_multiplier=1.0,
                           dispatch_overhead_s=d)
            times[V] = simulate(cp, tg, cm).step_time_s
        return list(times.values())

    def test_step_time_u_shaped_with_dispatch_overhead(self):
        vals = self.grid_times(0.05)
        best = min(vals)
        assert vals.index(best) not in (0, len(vals) - 1)
        assert vals[-1] > vals[0] or vals[-1] > best

    def test_step_time_monotone_without_overhead(self):
        vals = self.grid_times(0.0)
        assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))

    def test_sweep_skips_invalid_points(self):
        def build_point(pt):
            if pt["M"] % pt["P"]:
                raise ValueError("M must divide P")
            _, tg, cp = plan("interleaved", pt["P"], pt["M"], pt["V"])
            return cp, tg

        rows, notes = sweep([{"P": 2, "M": 4, "V": 2}, {"P": 2, "M": 3, "V": 2}],
                            build_point, CostModel(uniform_task_s=1.0))
        assert len(rows) == 1
        assert len(notes) == 1 and "skipped" in notes[0]

    def test_sweep_empty_grid(self):
        rows, notes = sweep([], lambda pt: None, CostModel())
        assert rows == [] and notes == []


class TestGantt:
    def test_svg_rows_and_blocks(self):
        _, tg, cp = plan("1f1b", 2, 2)
        rep = simulate(cp, tg, CostModel(uniform_task_s=1.0, link_latency_s=0.1))
        svg = render_svg(rep)
        assert svg.count('class="actor-row"') == 2
        nonzero = sum(1 for e in rep.events if e.end > e.start)
        assert svg.count('class="blk') == nonzero
        assert svg.startswith("<svg") and svg.endswith("</svg>")
