/** Client-side projections of server state. The metrics store enforces the
 * cursor contract (no duplicate, no out-of-order epochs) regardless of how
 * often a poll fires. */

import type { MetricsRecord, SessionView } from "./api.js";

export class MetricsStore {
  records: MetricsRecord[] = [];

  get cursor(): number {
    return this.records.length
      ? this.records[this.records.length - 1].epoch
      : -1;
  }

  /** Merge a polled page; returns how many records were actually new. */
  merge(records: MetricsRecord[]): number {
    let added = 0;
    for (const rec of records) {
      if (rec.epoch > this.cursor) {
        this.records.push(rec);
        added++;
      }
    }
    return added;
  }

  series(key: "train_loss" | "train_accuracy" | "test_accuracy" | "confound_reliance"):
      Array<[number, number]> {
    return this.records.map((r) => [r.epoch, r[key]] as [number, number]);
  }
}

/** Stability of the last `windowSize` test accuracies (mirrors the trainer's
 * is_stable check so the badge can render between polls). */
export function isStable(records: MetricsRecord[], windowSize = 5,
                         delta = 0.01): boolean {
  if (records.length < windowSize) return false;
  const tail = records.slice(-windowSize).map((r) => r.test_accuracy);
  return Math.max(...tail) - Math.min(...tail) <= delta;
}

export interface RoundGate {
  enabled: boolean;
  reason: string;
}

/** The "start round" button policy: disabled while training and in the stable
 * state until new feedback arrives (the server enforces the same rules). */
export function roundGate(view: SessionView,
                          feedbackSinceStable: boolean): RoundGate {
  if (view.state === "training") {
    return { enabled: false, reason: "round in progress" };
  }
  if (view.state === "stable" && !feedbackSinceStable) {
    return { enabled: false, reason: "stable — submit feedback to continue" };
  }
  return { enabled: true, reason: "" };
}
