/** Training monitor: cursor-polls the metrics endpoint, draws the accuracy /
 * loss series, and shows a stability badge. The server is the source of
 * truth; the poller only appends. */

import type { Client, SessionView } from "./api.js";
import { isStable, MetricsStore, roundGate } from "./state.js";

export interface MonitorElements {
  badge: HTMLElement;
  chart: HTMLCanvasElement;
  startButton: HTMLButtonElement;
  status: HTMLElement;
}

export class Monitor {
  readonly store = new MetricsStore();
  feedbackSinceStable = false;
  private timer: ReturnType<typeof setInterval> | null = null;
  view: SessionView | null = null;

  constructor(private client: Client, private sessionId: string,
              private el: MonitorElements,
              private intervalMs = 1000) {}

  start(): void {
    if (this.timer) return;
    this.timer = setInterval(() => void this.poll(), this.intervalMs);
    void this.poll();
  }

  stop(): void {
    if (this.timer) clearInterval(this.timer);
    this.timer = null;
  }

  async poll(): Promise<void> {
    try {
      const page = await this.client.getMetrics(this.sessionId, this.store.cursor);
      this.store.merge(page.records);
      const view = await this.client.getSession(this.sessionId);
      this.view = view;
      if (view.state === "stable") {
        // fresh feedback re-arms the button; reaching stable disarms it
        if (!this.feedbackSinceStable) this.renderGateReason(view);
      }
      this.render(view);
      this.el.status.textContent = "";
    } catch (err) {
      this.el.badge.textContent = "stale";
      this.el.badge.className = "badge stale";
      this.el.status.textContent = `connection lost, retrying (${String(err)})`;
    }
  }

  noteFeedback(): void {
    this.feedbackSinceStable = true;
    if (this.view) this.render(this.view);
  }

  private renderGateReason(view: SessionView): void {
    const gate = roundGate(view, this.feedbackSinceStable);
    this.el.startButton.disabled = !gate.enabled;
    this.el.startButton.title = gate.reason;
  }

  render(view: SessionView): void {
    const stable = view.state === "stable"
      || isStable(this.store.records);
    this.el.badge.textContent =
      view.state === "training" ? `training (round ${view.round + 1})`
      : view.state === "stable" ? "stable"
      : stable ? "stable (by window)" : view.state;
    this.el.badge.className = "badge " + view.state;
    if (view.state !== "stable") this.feedbackSinceStable = false;
    this.renderGateReason(view);
    this.drawChart();
  }

  async startRound(): Promise<void> {
    await this.client.startRound(this.sessionId);
    this.feedbackSinceStable = false;
    await this.poll();
  }

  drawChart(): void {
    const canvas = this.el.chart;
    let ctx: CanvasRenderingContext2D | null = null;
    try {
      ctx = canvas.getContext("2d");
    } catch {
      return; // non-rendering environments (tests)
    }
    if (!ctx) return;
    const W = canvas.width, H = canvas.height;
    ctx.clearRect(0, 0, W, H);
    const records = this.store.records;
    if (records.length < 2) return;
    const maxEpoch = records[records.length - 1].epoch;
    const maxLoss = Math.max(...records.map((r) => r.train_loss), 1e-9);
    const x = (e: number) => (e / Math.max(1, maxEpoch)) * (W - 10) + 5;
    const lines: Array<["train_accuracy" | "test_accuracy" | "train_loss", string,
                        (v: number) => number]> = [
      ["train_accuracy", "#4a9", (v) => H - 5 - v * (H - 10)],
      ["test_accuracy", "#36c", (v) => H - 5 - v * (H - 10)],
      ["train_loss", "#c63", (v) => H - 5 - (v / maxLoss) * (H - 10)],
    ];
    for (const [key, color, yof] of lines) {
      ctx.strokeStyle = color;
      ctx.beginPath();
      records.forEach((r, i) => {
        const px = x(r.epoch);
        const py = yof(r[key]);
        if (i === 0) ctx.moveTo(px, py);
        else ctx.lineTo(px, py);
      });
      ctx.stroke();
    }
  }
}
