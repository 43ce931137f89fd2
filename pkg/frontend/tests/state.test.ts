import { describe, expect, it } from "vitest";
import type { MetricsRecord, SessionView } from "../src/api.js";
import { isStable, MetricsStore, roundGate } from "../src/state.js";

function rec(epoch: number, testAcc = 0.5): MetricsRecord {
  return { epoch, phase: "initial", train_loss: 1.0, train_accuracy: 0.5,
           test_accuracy: testAcc, terms: {}, confound_reliance: 0.0 };
}

function view(state: SessionView["state"]): SessionView {
  return { id: "s", state, round: 1, trained: true, epochs: 5, classes: 2,
           concepts: 4, confounded_class: 0, feedback_count: 0,
           image_ids: [], last_error: null };
}

describe("MetricsStore", () => {
  it("merges only unseen epochs (cursor contract)", () => {
    const store = new MetricsStore();
    expect(store.cursor).toBe(-1);
    expect(store.merge([rec(0), rec(1)])).toBe(2);
    expect(store.merge([rec(0), rec(1), rec(2)])).toBe(1);
    expect(store.cursor).toBe(2);
    expect(store.records.map((r) => r.epoch)).toEqual([0, 1, 2]);
  });

  it("never renders duplicate epochs across overlapping polls", () => {
    const store = new MetricsStore();
    store.merge([rec(0), rec(1)]);
    store.merge([rec(1), rec(2)]);
    store.merge([rec(2), rec(3)]);
    const epochs = store.records.map((r) => r.epoch);
    expect(new Set(epochs).size).toBe(epochs.length);
    expect(epochs).toEqual([0, 1, 2, 3]);
  });

  it("exposes series for charting", () => {
    const store = new MetricsStore();
    store.merge([rec(0, 0.1), rec(1, 0.9)]);
    expect(store.series("test_accuracy")).toEqual([[0, 0.1], [1, 0.9]]);
  });
});

describe("isStable", () => {
  it("matches the trainer semantics", () => {
    expect(isStable([rec(0, 0.8), rec(1, 0.8), rec(2, 0.8), rec(3, 0.8),
                     rec(4, 0.8)])).toBe(true);
    expect(isStable([rec(0, 0.1), rec(1, 0.9), rec(2, 0.1), rec(3, 0.9),
                     rec(4, 0.1)])).toBe(false);
    expect(isStable([rec(0, 0.8)])).toBe(false);
  });
});

describe("roundGate", () => {
  it("blocks during training", () => {
    expect(roundGate(view("training"), false).enabled).toBe(false);
  });
  it("blocks when stable until new feedback arrives", () => {
    expect(roundGate(view("stable"), false).enabled).toBe(false);
    expect(roundGate(view("stable"), true).enabled).toBe(true);
  });
  it("open when awaiting feedback", () => {
    expect(roundGate(view("awaiting_feedback"), false).enabled).toBe(true);
  });
});
