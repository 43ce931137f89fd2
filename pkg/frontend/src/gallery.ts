/** Concept gallery: one card per packet, in server order. Overlay toggling is
 * purely client-side (both layers are decoded up front, no extra API call). */

import type { ConceptPacket } from "./api.js";
import { blendOverlay, decodePgm16, decodePpm, DecodedImage } from "./netpbm.js";

export interface CardHooks {
  onMarkIrrelevant(concept: number, scope: "instance" | "class" | "global",
                   instanceId: string | null): void;
  onMarkRelevant(concept: number, classIndex: number): void;
  onConceptLabel(concept: number, imageId: string, desired: 0 | 1): void;
  onOpenRegionEditor(concept: number, imageId: string): void;
}

export function paintTo(canvas: HTMLCanvasElement, img: DecodedImage,
                        scale = 2): void {
  canvas.width = img.width * scale;
  canvas.height = img.height * scale;
  canvas.dataset.sourceWidth = String(img.width);
  let ctx: CanvasRenderingContext2D | null = null;
  try {
    ctx = canvas.getContext("2d");
  } catch {
    return; // non-rendering environments (tests)
  }
  if (!ctx) return;
  const off = new OffscreenCanvas(img.width, img.height);
  const offCtx = off.getContext("2d");
  if (!offCtx) return;
  const pixels = new Uint8ClampedArray(img.rgba);  // fresh ArrayBuffer backing
  offCtx.putImageData(new ImageData(pixels, img.width, img.height), 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function weightStrip(weights: number[], ownerClass: number): HTMLElement {
  const strip = document.createElement("div");
  strip.className = "weights";
  weights.forEach((w, y) => {
    const chip = document.createElement("span");
    chip.className = "chip" + (y === ownerClass ? " own" : "");
    chip.textContent = `w(${y})=${w.toFixed(2)}`;
    strip.appendChild(chip);
  });
  return strip;
}

function kappaStrip(row: number[], self: number): HTMLElement {
  const strip = document.createElement("div");
  strip.className = "kappa";
  strip.title = "activation-kernel similarity to every concept";
  row.forEach((v, j) => {
    const cell = document.createElement("span");
    cell.className = "kcell";
    cell.style.opacity = String(0.15 + 0.85 * Math.min(1, v));
    cell.textContent = j === self ? "●" : v.toFixed(2);
    strip.appendChild(cell);
  });
  return strip;
}

export function renderGallery(root: HTMLElement, packets: ConceptPacket[],
                              classes: number, hooks: CardHooks): void {
  root.replaceChildren();
  for (const packet of packets) {
    root.appendChild(renderCard(packet, classes, hooks));
  }
}

function renderCard(packet: ConceptPacket, classes: number,
                    hooks: CardHooks): HTMLElement {
  const card = document.createElement("article");
  card.className = "card";
  card.dataset.concept = String(packet.concept);

  const head = document.createElement("header");
  head.textContent = `concept ${packet.concept} · class ${packet.owner_class}`;
  card.appendChild(head);

  const reps = document.createElement("div");
  reps.className = "reps";
  const decoded = packet.representatives.map((rep) => ({
    rep,
    image: decodePpm(rep.image_ppm),
    overlay: blendOverlay(decodePpm(rep.image_ppm), decodePgm16(rep.attribution_pgm)),
  }));
  let overlayOn = false;
  const canvases: HTMLCanvasElement[] = [];
  for (const { rep, image } of decoded) {
    const fig = document.createElement("figure");
    const canvas = document.createElement("canvas");
    canvas.className = "rep";
    paintTo(canvas, image);
    canvases.push(canvas);
    const cap = document.createElement("figcaption");
    cap.textContent = `${rep.image_id} · c=${rep.activation.toFixed(3)}`;
    fig.append(canvas, cap);
    reps.appendChild(fig);
  }
  card.appendChild(reps);

  const toggle = document.createElement("button");
  toggle.className = "toggle-overlay";
  toggle.textContent = "show attribution";
  toggle.addEventListener("click", () => {
    overlayOn = !overlayOn;
    toggle.textContent = overlayOn ? "hide attribution" : "show attribution";
    canvases.forEach((canvas, i) =>
      paintTo(canvas, overlayOn ? decoded[i].overlay : decoded[i].image));
  });
  card.appendChild(toggle);

  card.appendChild(weightStrip(packet.weights, packet.owner_class));
  card.appendChild(kappaStrip(packet.kappa_row, packet.concept));

  const form = document.createElement("div");
  form.className = "feedback-form";

  const scopeSel = document.createElement("select");
  scopeSel.className = "scope";
  for (const kind of ["class", "global", "instance"]) {
    const opt = document.createElement("option");
    opt.value = kind;
    opt.textContent = `${kind} scope`;
    scopeSel.appendChild(opt);
  }
  const markBtn = document.createElement("button");
  markBtn.className = "mark-irrelevant";
  markBtn.textContent = "mark irrelevant";
  markBtn.addEventListener("click", () => {
    const scope = scopeSel.value as "instance" | "class" | "global";
    const instanceId = scope === "instance"
      ? packet.representatives[0].image_id : null;
    hooks.onMarkIrrelevant(packet.concept, scope, instanceId);
  });

  const relevantBtn = document.createElement("button");
  relevantBtn.className = "mark-relevant";
  relevantBtn.textContent = "mark relevant";
  relevantBtn.addEventListener("click", () =>
    hooks.onMarkRelevant(packet.concept, packet.owner_class));

  const labelOff = document.createElement("button");
  labelOff.className = "label-off";
  labelOff.textContent = "should be off here";
  labelOff.addEventListener("click", () =>
    hooks.onConceptLabel(packet.concept, packet.representatives[0].image_id, 0));

  const regionBtn = document.createElement("button");
  regionBtn.className = "edit-region";
  regionBtn.textContent = "paint region";
  regionBtn.addEventListener("click", () =>
    hooks.onOpenRegionEditor(packet.concept, packet.representatives[0].image_id));

  form.append(scopeSel, markBtn, relevantBtn, labelOff, regionBtn);
  card.appendChild(form);
  return card;
}
