import { beforeEach, describe, expect, it, vi } from "vitest";
import type { ConceptPacket } from "../src/api.js";
import { renderGallery } from "../src/gallery.js";
import { bytesToBase64 } from "../src/netpbm.js";

function tinyPpm(): string {
  const header = "P6\n2 2\n255\n";
  const bytes = new Uint8Array(header.length + 12);
  for (let i = 0; i < header.length; i++) bytes[i] = header.charCodeAt(i);
  return bytesToBase64(bytes);
}

function tinyPgm(): string {
  const header = "P5\n2 2\n65535\n";
  const bytes = new Uint8Array(header.length + 8);
  for (let i = 0; i < header.length; i++) bytes[i] = header.charCodeAt(i);
  return bytesToBase64(bytes);
}

function packet(concept: number): ConceptPacket {
  return {
    concept,
    owner_class: concept % 2,
    prototype_ppm: tinyPpm(),
    weights: [0.5, -0.1],
    kappa_row: [1, 0.2, 0.1, 0.05],
    representatives: [0, 1, 2].map((i) => ({
      image_id: `train/000${i}`,
      location: [0, 0] as [number, number],
      activation: 0.9 - i * 0.1,
      image_ppm: tinyPpm(),
      attribution_pgm: tinyPgm(),
      attribution_total: 0.9,
    })),
  };
}

describe("renderGallery", () => {
  let root: HTMLElement;
  const hooks = {
    onMarkIrrelevant: vi.fn(),
    onMarkRelevant: vi.fn(),
    onConceptLabel: vi.fn(),
    onOpenRegionEditor: vi.fn(),
  };

  beforeEach(() => {
    root = document.createElement("div");
    vi.clearAllMocks();
  });

  it("renders one card per packet in server order", () => {
    renderGallery(root, [packet(3), packet(0), packet(2)], 2, hooks);
    const cards = [...root.querySelectorAll(".card")];
    expect(cards.length).toBe(3);
    expect(cards.map((c) => (c as HTMLElement).dataset.concept))
      .toEqual(["3", "0", "2"]);
  });

  it("overlay toggle flips locally without any network call", () => {
    const fetchSpy = vi.spyOn(globalThis, "fetch");
    renderGallery(root, [packet(0)], 2, hooks);
    const toggle = root.querySelector<HTMLButtonElement>(".toggle-overlay")!;
    expect(toggle.textContent).toBe("show attribution");
    toggle.click();
    expect(toggle.textContent).toBe("hide attribution");
    toggle.click();
    expect(toggle.textContent).toBe("show attribution");
    expect(fetchSpy).not.toHaveBeenCalled();
    fetchSpy.mockRestore();
  });

  it("mark-irrelevant passes the selected scope", () => {
    renderGallery(root, [packet(1)], 2, hooks);
    const select = root.querySelector<HTMLSelectElement>(".scope")!;
    select.value = "global";
    root.querySelector<HTMLButtonElement>(".mark-irrelevant")!.click();
    expect(hooks.onMarkIrrelevant).toHaveBeenCalledWith(1, "global", null);
  });

  it("shows weights per class and a kappa strip", () => {
    renderGallery(root, [packet(0)], 2, hooks);
    expect(root.querySelectorAll(".chip").length).toBe(2);
    expect(root.querySelectorAll(".kcell").length).toBe(4);
  });
});
