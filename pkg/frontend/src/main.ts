/** Console bootstrap: load a session, render the gallery, wire feedback forms
 * and the training monitor. All state lives on the server; reloading the page
 * reproduces the identical view from API data. */

import { ApiError, Client } from "./api.js";
import { RegionBrush } from "./brush.js";
import { renderGallery, paintTo } from "./gallery.js";
import { Monitor } from "./monitor.js";
import { decodePpm } from "./netpbm.js";

export interface AppOptions {
  baseUrl?: string;
  sessionId?: string;
  pollIntervalMs?: number;
}

export interface App {
  client: Client;
  monitor: Monitor;
  refreshGallery(): Promise<void>;
  submitRegion(): Promise<void>;
  teardown(): void;
}

function el<K extends keyof HTMLElementTagNameMap>(tag: K, className?: string,
                                                   text?: string) {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export async function initApp(root: HTMLElement,
                              options: AppOptions = {}): Promise<App> {
  const client = new Client(options.baseUrl ?? "");
  const params = new URLSearchParams(
    typeof location !== "undefined" ? location.search : "");
  const sessionId = options.sessionId ?? params.get("session");
  if (!sessionId) {
    root.replaceChildren(el("p", "error",
      "no session: open ?session=<id> (create one via POST /sessions)"));
    throw new Error("no session id");
  }

  root.replaceChildren();
  const header = el("header", "topbar");
  const title = el("h1", undefined, `graybox session ${sessionId}`);
  const badge = el("span", "badge", "…");
  const startButton = el("button", "start-round", "start round") as HTMLButtonElement;
  const status = el("span", "status");
  header.append(title, badge, startButton, status);
  root.appendChild(header);

  const chart = el("canvas", "chart") as HTMLCanvasElement;
  chart.width = 640;
  chart.height = 120;
  root.appendChild(chart);

  const feedbackLog = el("div", "feedback-note");
  root.appendChild(feedbackLog);

  const gallery = el("section", "gallery");
  root.appendChild(gallery);

  const editor = el("section", "region-editor hidden");
  const editorTitle = el("h2", undefined, "");
  const editorCanvas = el("canvas", "region-canvas") as HTMLCanvasElement;
  const paintAllBtn = el("button", "paint-all", "paint all");
  const submitRegionBtn = el("button", "submit-region", "submit region");
  const closeBtn = el("button", "close-region", "close");
  editor.append(editorTitle, editorCanvas, paintAllBtn, submitRegionBtn, closeBtn);
  root.appendChild(editor);

  const monitor = new Monitor(client, sessionId,
                              { badge, chart, startButton, status },
                              options.pollIntervalMs ?? 1000);

  let view = await client.getSession(sessionId);
  monitor.view = view;

  let regionTarget: { concept: number; imageId: string;
                      brush: RegionBrush } | null = null;

  async function markFeedback(promise: Promise<{ feedback_count: number }>):
      Promise<void> {
    try {
      const result = await promise;
      feedbackLog.textContent = `feedback recorded (${result.feedback_count} total)`;
      feedbackLog.classList.remove("error");
      monitor.noteFeedback();
    } catch (err) {
      feedbackLog.textContent = err instanceof ApiError
        ? `rejected (${err.status}): ${err.message}`
        : `failed: ${String(err)}`;
      feedbackLog.classList.add("error");
    }
  }

  const hooks = {
    onMarkIrrelevant(concept: number, scope: "instance" | "class" | "global",
                     instanceId: string | null) {
      const scopeBody: { kind: "instance" | "class" | "global";
                         x_id?: string; y?: number } =
        scope === "global" ? { kind: "global" }
        : scope === "class" ? { kind: "class", y: view.confounded_class }
        : { kind: "instance", x_id: instanceId ?? undefined,
            y: view.confounded_class };
      void markFeedback(client.submitFeedback(sessionId!, {
        kind: "mark_irrelevant", concept, scope: scopeBody,
      }));
    },
    onMarkRelevant(concept: number, classIndex: number) {
      void markFeedback(client.submitFeedback(sessionId!, {
        kind: "mark_relevant", concept, class_index: classIndex,
      }));
    },
    onConceptLabel(concept: number, imageId: string, desired: 0 | 1) {
      void markFeedback(client.submitFeedback(sessionId!, {
        kind: "concept_label", concept, image_id: imageId, desired,
      }));
    },
    onOpenRegionEditor(concept: number, imageId: string) {
      void openRegionEditor(concept, imageId);
    },
  };

  async function refreshGallery(): Promise<void> {
    const { packets } = await client.getConcepts(sessionId!);
    view = await client.getSession(sessionId!);
    renderGallery(gallery, packets, view.classes, hooks);
  }

  async function openRegionEditor(concept: number, imageId: string):
      Promise<void> {
    const { packets } = await client.getConcepts(sessionId!);
    const packet = packets.find((p) => p.concept === concept);
    const rep = packet?.representatives.find((r) => r.image_id === imageId)
      ?? packet?.representatives[0];
    if (!rep) return;
    const image = decodePpm(rep.image_ppm);
    regionTarget = { concept, imageId: rep.image_id,
                     brush: new RegionBrush(image.height, image.width) };
    editorTitle.textContent =
      `relevant region for concept ${concept} on ${rep.image_id}`;
    paintTo(editorCanvas, image, 4);
    editor.classList.remove("hidden");
  }

  editorCanvas.addEventListener("pointerdown", (ev) => {
    if (!regionTarget) return;
    const scale = editorCanvas.width /
      Number(editorCanvas.dataset.sourceWidth ?? editorCanvas.width);
    const rect = editorCanvas.getBoundingClientRect();
    const col = (ev.clientX - rect.left) / scale;
    const row = (ev.clientY - rect.top) / scale;
    regionTarget.brush.paint(row, col, 2);
  });
  paintAllBtn.addEventListener("click", () => regionTarget?.brush.paintAll(1));

  async function submitRegion(): Promise<void> {
    if (!regionTarget) return;
    const { concept, imageId, brush } = regionTarget;
    await markFeedback(client.submitFeedback(sessionId!, {
      kind: "concept_region", concept, image_id: imageId,
      region: brush.toPackedBase64(),
    }));
    editor.classList.add("hidden");
    regionTarget = null;
  }
  submitRegionBtn.addEventListener("click", () => void submitRegion());
  closeBtn.addEventListener("click", () => {
    editor.classList.add("hidden");
    regionTarget = null;
  });

  startButton.addEventListener("click", () => {
    startButton.disabled = true;
    void monitor.startRound().catch((err) => {
      status.textContent = `round rejected: ${String(err)}`;
      startButton.disabled = false;
    });
  });

  await refreshGallery();
  monitor.start();

  return {
    client,
    monitor,
    refreshGallery,
    submitRegion,
    teardown: () => monitor.stop(),
  };
}

declare global {
  interface Window {
    grayboxApp?: Promise<App>;
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  window.grayboxApp = initApp(document.getElementById("app")!);
}
