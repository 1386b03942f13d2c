/** Browser shell: canvas rendering and event wiring over SessionController. */
import { GeoEditClient } from "./api.js";
import { DIRECTIONS, Difficulty, Op, clampDraft, magnitudeBand } from "./instruction.js";
import { MaskLayer } from "./mask-layer.js";
import { MaskRole, SessionController } from "./state.js";

const ARTIFACT_ORDER = [
  "source.png",
  "coarse.png",
  "background.png",
  "composite.png",
  "refined.png",
];

function pngBlobUrl(bytes: Uint8Array): string {
  const copy = new Uint8Array(bytes.length);
  copy.set(bytes);
  return URL.createObjectURL(new Blob([copy.buffer], { type: "image/png" }));
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

class App {
  private controller: SessionController;
  private canvas = el<HTMLCanvasElement>("canvas");
  private ctx = this.canvas.getContext("2d")!;
  private imageBitmap: ImageBitmap | null = null;
  private previewMask: MaskLayer | null = null;
  private previewTimer: number | null = null;
  private drawing = false;
  private lastPoint: [number, number] | null = null;
  private assistMode = false;

  constructor() {
    this.controller = new SessionController(new GeoEditClient(""), {
      onStatus: (text) => (el("status").textContent = text),
    });
    this.bind();
  }

  private bind(): void {
    el<HTMLInputElement>("file").addEventListener("change", (e) => this.onFile(e));
    el<HTMLSelectElement>("layer").addEventListener("change", (e) => {
      this.controller.activeRole = (e.target as HTMLSelectElement).value as MaskRole;
      this.render();
    });
    el<HTMLInputElement>("brush-size").addEventListener("input", (e) => {
      this.controller.brushRadius = Number((e.target as HTMLInputElement).value);
    });
    el<HTMLInputElement>("eraser").addEventListener("change", (e) => {
      this.controller.eraser = (e.target as HTMLInputElement).checked;
    });
    el<HTMLButtonElement>("assist").addEventListener("click", () => {
      this.assistMode = !this.assistMode;
      el("assist").classList.toggle("active", this.assistMode);
    });
    el<HTMLButtonElement>("clear-mask").addEventListener("click", () => {
      this.controller.clearActive();
      this.render();
    });

    const opSelect = el<HTMLSelectElement>("op");
    opSelect.addEventListener("change", () => {
      this.populateDirections(opSelect.value as Op);
      this.onDraftChange();
    });
    for (const id of ["direction", "difficulty"]) {
      el<HTMLSelectElement>(id).addEventListener("change", () => this.onDraftChange());
    }
    el<HTMLInputElement>("magnitude").addEventListener("input", () => this.onDraftChange());
    el<HTMLInputElement>("prompt").addEventListener("input", (e) => {
      this.controller.prompt = (e.target as HTMLInputElement).value;
    });

    for (const step of ["inpaint", "refine", "full"] as const) {
      el<HTMLButtonElement>(`run-${step}`).addEventListener("click", () => this.run(step));
    }
    el<HTMLButtonElement>("export").addEventListener("click", () => this.exportArtifacts());

    this.canvas.addEventListener("pointerdown", (e) => this.onPointerDown(e));
    this.canvas.addEventListener("pointermove", (e) => this.onPointerMove(e));
    window.addEventListener("pointerup", () => {
      this.drawing = false;
      this.lastPoint = null;
    });
    this.populateDirections("move");
  }

  private populateDirections(op: Op): void {
    const select = el<HTMLSelectElement>("direction");
    select.innerHTML = "";
    for (const d of DIRECTIONS[op]) {
      const opt = document.createElement("option");
      opt.value = d;
      opt.textContent = d.replace("_", " ");
      select.appendChild(opt);
    }
  }

  private canvasPoint(e: PointerEvent): [number, number] {
    const rect = this.canvas.getBoundingClientRect();
    const x = ((e.clientX - rect.left) / rect.width) * this.controller.width;
    const y = ((e.clientY - rect.top) / rect.height) * this.controller.height;
    return [x, y];
  }

  private async onPointerDown(e: PointerEvent): Promise<void> {
    if (!this.controller.sessionId) return;
    const [x, y] = this.canvasPoint(e);
    if (this.assistMode) {
      try {
        await this.controller.assistClick(Math.round(x), Math.round(y));
      } catch (err) {
        el("status").textContent = String(err);
      }
      this.render();
      return;
    }
    this.drawing = true;
    this.lastPoint = [x, y];
    this.controller.dab(x, y);
    this.render();
  }

  private onPointerMove(e: PointerEvent): void {
    if (!this.drawing || !this.lastPoint) return;
    const [x, y] = this.canvasPoint(e);
    this.controller.stroke(this.lastPoint[0], this.lastPoint[1], x, y);
    this.lastPoint = [x, y];
    this.render();
  }

  private async onFile(e: Event): Promise<void> {
    const input = e.target as HTMLInputElement;
    const file = input.files?.[0];
    if (!file) return;
    const bytes = new Uint8Array(await file.arrayBuffer());
    await this.controller.open(bytes);
    this.imageBitmap = await createImageBitmap(await (await fetch(pngBlobUrl(bytes))).blob());
    this.canvas.width = this.controller.width;
    this.canvas.height = this.controller.height;
    this.previewMask = null;
    this.render();
  }

  private readDraft(): void {
    const draft = clampDraft({
      op: el<HTMLSelectElement>("op").value as Op,
      direction: el<HTMLSelectElement>("direction").value,
      magnitude: Number(el<HTMLInputElement>("magnitude").value),
      difficulty: el<HTMLSelectElement>("difficulty").value as Difficulty,
    });
    this.controller.draft = draft;
    const [lo, hi] = magnitudeBand(draft.op, draft.direction, draft.difficulty);
    el("magnitude-range").textContent = `[${lo}, ${hi}] -> ${draft.magnitude.toFixed(2)}`;
  }

  /** Debounced Step-1 preview on every draft change. */
  private onDraftChange(): void {
    this.readDraft();
    if (!this.controller.sessionId || this.controller.layers!.source.isEmpty()) return;
    if (this.previewTimer !== null) window.clearTimeout(this.previewTimer);
    this.previewTimer = window.setTimeout(async () => {
      try {
        const result = await this.controller.preview();
        const bytes = await this.controller.artifact(result.target_mask);
        this.previewMask = MaskLayer.fromPng(bytes);
        el("status").textContent = "preview updated";
      } catch (err) {
        el("status").textContent = String(err);
        this.previewMask = null;
      }
      this.render();
    }, 300);
  }

  private async run(step: "inpaint" | "refine" | "full"): Promise<void> {
    if (!this.controller.sessionId) return;
    for (const id of ["run-inpaint", "run-refine", "run-full"]) {
      el<HTMLButtonElement>(id).disabled = true;
    }
    try {
      if (step !== "inpaint" && !this.controller.lastPreview) await this.controller.preview();
      await this.controller.runStep(step);
      await this.refreshThumbnails();
    } catch (err) {
      el("status").textContent = String(err);
    } finally {
      for (const id of ["run-inpaint", "run-refine", "run-full"]) {
        el<HTMLButtonElement>(id).disabled = false;
      }
    }
  }

  private async refreshThumbnails(): Promise<void> {
    const strip = el("thumbnails");
    strip.innerHTML = "";
    const names = await this.controller.artifactNames();
    for (const name of ARTIFACT_ORDER) {
      if (!names.includes(name)) continue;
      const bytes = await this.controller.artifact(name);
      const url = pngBlobUrl(bytes);
      const figure = document.createElement("figure");
      const img = document.createElement("img");
      img.src = url;
      img.title = name;
      const caption = document.createElement("figcaption");
      caption.textContent = name.replace(".png", "");
      figure.append(img, caption);
      strip.appendChild(figure);
    }
  }

  private async exportArtifacts(): Promise<void> {
    const artifacts = await this.controller.exportArtifacts();
    for (const [name, bytes] of artifacts) {
      const url = pngBlobUrl(bytes);
      const a = document.createElement("a");
      a.href = url;
      a.download = name;
      a.click();
      URL.revokeObjectURL(url);
    }
  }

  private render(): void {
    if (!this.imageBitmap) return;
    const { width, height } = this.controller;
    this.ctx.clearRect(0, 0, width, height);
    this.ctx.drawImage(this.imageBitmap, 0, 0);
    if (this.controller.layers) {
      this.overlay(this.controller.layers.source, "rgba(255, 64, 64, 0.45)");
      this.overlay(this.controller.layers.completion, "rgba(64, 64, 255, 0.45)");
    }
    if (this.previewMask) this.overlay(this.previewMask, "rgba(64, 220, 64, 0.35)");
  }

  private overlay(mask: MaskLayer, fill: string): void {
    const { width, height } = mask;
    const image = this.ctx.createImageData(width, height);
    const rgba = fill.match(/rgba\((\d+), (\d+), (\d+), ([\d.]+)\)/)!;
    const [r, g, b, a] = [Number(rgba[1]), Number(rgba[2]), Number(rgba[3]), Number(rgba[4]) * 255];
    for (let i = 0; i < mask.data.length; i++) {
      if (!mask.data[i]) continue;
      image.data[i * 4] = r;
      image.data[i * 4 + 1] = g;
      image.data[i * 4 + 2] = b;
      image.data[i * 4 + 3] = a;
    }
    const tmp = document.createElement("canvas");
    tmp.width = width;
    tmp.height = height;
    tmp.getContext("2d")!.putImageData(image, 0, 0);
    this.ctx.drawImage(tmp, 0, 0);
  }
}

new App();
