/**
 * Annotation app: paint part masks on generated samples, launch training,
 * and inspect predictions against the annotation.
 *
 * All mask edits happen at native sample resolution on a MaskCanvas buffer;
 * the screen canvas is a nearest-neighbor zoom of that buffer, and uploads
 * encode the buffer directly, so no resampling ever touches the labels.
 */

import { ApiClient, ApiError, ClassInfo, SampleInfo } from "./api.js";
import { MaskCanvas, UNLABELED } from "./maskpaint.js";
import { blendOverlay, labelsToRgba, Rgb } from "./overlay.js";
import { base64ToBytes } from "./api.js";
import { decodePng, encodeGrayPng } from "./png.js";

const ZOOM = 12;
const POLL_MS = 700;

type ViewMode = "image" | "mask" | "blend";

class App {
  private api = new ApiClient("");
  private classes: ClassInfo[] = [];
  private samples: SampleInfo[] = [];
  private activeSample: number | null = null;
  private mask: MaskCanvas | null = null;
  private image: { data: Uint8ClampedArray; width: number; height: number } | null = null;
  private prediction: Uint8Array | null = null;
  private brush = { classId: 1, radius: 1.5 };
  private viewMode: ViewMode = "blend";
  private opacity = 0.55;
  private classVisible: boolean[] = [];
  private painting = false;
  private strokePath: { x: number; y: number }[] = [];
  private pollTimer: number | null = null;

  private canvas = document.getElementById("paint") as HTMLCanvasElement;
  private sampleList = document.getElementById("samples") as HTMLElement;
  private classBar = document.getElementById("classes") as HTMLElement;
  private statusLine = document.getElementById("status") as HTMLElement;
  private trainButton = document.getElementById("train") as HTMLButtonElement;
  private saveButton = document.getElementById("save") as HTMLButtonElement;
  private undoButton = document.getElementById("undo") as HTMLButtonElement;
  private fillButton = document.getElementById("fill") as HTMLButtonElement;
  private previewButton = document.getElementById("preview") as HTMLButtonElement;
  private radiusInput = document.getElementById("radius") as HTMLInputElement;
  private opacityInput = document.getElementById("opacity") as HTMLInputElement;
  private modeSelect = document.getElementById("mode") as HTMLSelectElement;

  async start(): Promise<void> {
    const classBody = await this.api.getClasses();
    this.classes = classBody.classes;
    this.classVisible = this.classes.map(() => true);
    this.renderClassBar();
    this.samples = await this.api.listSamples();
    this.renderSampleList();
    this.wireControls();
    this.pollStatus();
    if (this.samples.length > 0) await this.selectSample(this.samples[0].id);
  }

  private renderClassBar(): void {
    this.classBar.innerHTML = "";
    for (const cls of this.classes) {
      const button = document.createElement("button");
      button.textContent = cls.name;
      button.style.borderColor = `rgb(${cls.color.join(",")})`;
      button.className = cls.id === this.brush.classId ? "cls active" : "cls";
      button.onclick = () => {
        this.brush.classId = cls.id;
        this.renderClassBar();
      };
      const toggle = document.createElement("input");
      toggle.type = "checkbox";
      toggle.checked = this.classVisible[cls.id];
      toggle.title = "visible in overlay";
      toggle.onchange = () => {
        this.classVisible[cls.id] = toggle.checked;
        this.redraw();
      };
      const wrap = document.createElement("span");
      wrap.append(button, toggle);
      this.classBar.append(wrap);
    }
  }

  private renderSampleList(): void {
    this.sampleList.innerHTML = "";
    for (const sample of this.samples) {
      const item = document.createElement("div");
      item.className = sample.id === this.activeSample ? "sample active" : "sample";
      const thumb = document.createElement("img");
      thumb.src = this.api.imageUrl(sample.id);
      const label = document.createElement("span");
      label.textContent = `#${sample.id}${sample.has_mask ? " ✓" : ""}`;
      item.append(thumb, label);
      item.onclick = () => void this.selectSample(sample.id);
      this.sampleList.append(item);
    }
  }

  private async selectSample(id: number): Promise<void> {
    this.activeSample = id;
    this.prediction = null;
    const response = await fetch(this.api.imageUrl(id));
    const decoded = await decodePng(new Uint8Array(await response.arrayBuffer()));
    const rgba = new Uint8ClampedArray(decoded.width * decoded.height * 4);
    for (let i = 0; i < decoded.width * decoded.height; i++) {
      for (let c = 0; c < 3; c++) {
        rgba[i * 4 + c] = decoded.channels >= 3
          ? decoded.data[i * decoded.channels + c]
          : decoded.data[i * decoded.channels];
      }
      rgba[i * 4 + 3] = 255;
    }
    this.image = { data: rgba, width: decoded.width, height: decoded.height };
    this.mask = new MaskCanvas(decoded.width, decoded.height);
    const existing = await this.api.getMaskBytes(id);
    if (existing) {
      const dec = await decodePng(existing);
      this.mask.loadFrom(dec.data);
    }
    this.canvas.width = decoded.width;
    this.canvas.height = decoded.height;
    this.canvas.style.width = `${decoded.width * ZOOM}px`;
    this.canvas.style.height = `${decoded.height * ZOOM}px`;
    this.renderSampleList();
    this.redraw();
  }

  private canvasPoint(event: PointerEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return {
      x: ((event.clientX - rect.left) / rect.width) * this.canvas.width,
      y: ((event.clientY - rect.top) / rect.height) * this.canvas.height,
    };
  }

  private wireControls(): void {
    this.canvas.addEventListener("pointerdown", (e) => {
      if (!this.mask) return;
      this.painting = true;
      this.strokePath = [this.canvasPoint(e)];
      this.canvas.setPointerCapture(e.pointerId);
    });
    this.canvas.addEventListener("pointermove", (e) => {
      if (!this.painting || !this.mask) return;
      this.strokePath.push(this.canvasPoint(e));
      // the stroke commits on pointerup as one undoable edit; meanwhile
      // draw a transient preview of it
      this.redraw(this.strokePath);
    });
    const finish = () => {
      if (!this.painting || !this.mask) return;
      this.painting = false;
      this.mask.paintStroke(this.brush, this.strokePath);
      this.strokePath = [];
      this.redraw();
    };
    this.canvas.addEventListener("pointerup", finish);
    this.canvas.addEventListener("pointercancel", finish);

    this.undoButton.onclick = () => {
      if (this.mask?.undo()) this.redraw();
    };
    this.fillButton.onclick = () => {
      this.mask?.fill(this.brush.classId);
      this.redraw();
    };
    this.radiusInput.oninput = () => {
      this.brush.radius = parseFloat(this.radiusInput.value);
    };
    this.opacityInput.oninput = () => {
      this.opacity = parseFloat(this.opacityInput.value);
      this.redraw();
    };
    this.modeSelect.onchange = () => {
      this.viewMode = this.modeSelect.value as ViewMode;
      this.redraw();
    };
    this.saveButton.onclick = () => void this.saveMask();
    this.trainButton.onclick = () => void this.launchTraining();
    this.previewButton.onclick = () => void this.fetchPreview();
  }

  private async saveMask(): Promise<void> {
    if (this.mask === null || this.activeSample === null) return;
    const png = await encodeGrayPng(this.mask.width, this.mask.height,
                                    this.mask.snapshot());
    try {
      await this.api.putMask(this.activeSample, png);
      this.setStatus(`mask #${this.activeSample} saved`);
      this.samples = await this.api.listSamples();
      this.renderSampleList();
    } catch (err) {
      this.setStatus(err instanceof ApiError ? err.message : String(err));
    }
  }

  private async launchTraining(): Promise<void> {
    try {
      await this.api.startTraining({});
      this.setStatus("training started");
      this.trainButton.disabled = true;
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.setStatus("training in progress");
        this.trainButton.disabled = true;
      } else {
        this.setStatus(err instanceof ApiError ? err.message : String(err));
      }
    }
  }

  private pollStatus(): void {
    const tick = async () => {
      try {
        const status = await this.api.getTrainStatus();
        if (status.state === "running") {
          this.setStatus(`training… ${(status.progress * 100).toFixed(0)}%`);
          this.trainButton.disabled = true;
        } else {
          if (status.state === "failed") this.setStatus(`training failed: ${status.error}`);
          if (status.state === "done") this.setStatus("training done — preview updated models");
          this.trainButton.disabled = false;
        }
      } catch {
        this.setStatus("server unreachable");
      }
      this.pollTimer = window.setTimeout(() => void tick(), POLL_MS);
    };
    void tick();
  }

  private async fetchPreview(): Promise<void> {
    if (this.activeSample === null) return;
    try {
      const result = await this.api.predictSample(this.activeSample);
      const decoded = await decodePng(base64ToBytes(result.mask_png_base64));
      this.prediction = decoded.data;
      this.setStatus(`preview for #${this.activeSample} loaded`);
      this.redraw();
    } catch (err) {
      this.setStatus(err instanceof ApiError ? err.message : String(err));
    }
  }

  private setStatus(text: string): void {
    this.statusLine.textContent = text;
  }

  private redraw(transientPath?: { x: number; y: number }[]): void {
    if (!this.image || !this.mask) return;
    const ctx = this.canvas.getContext("2d")!;
    const colors = this.classes.map((c) => c.color as Rgb);
    const labels = this.prediction ?? this.mask.data;
    let rgba: Uint8ClampedArray;
    if (this.viewMode === "image") {
      rgba = this.image.data.slice();
    } else if (this.viewMode === "mask") {
      rgba = labelsToRgba(labels, colors);
    } else {
      rgba = blendOverlay(this.image.data, labels, colors, this.classVisible,
                          this.opacity);
    }
    if (transientPath && transientPath.length) {
      const preview = new MaskCanvas(this.mask.width, this.mask.height);
      preview.loadFrom(this.mask.data);
      preview.paintStroke(this.brush, transientPath);
      rgba = blendOverlay(rgba, preview.data, colors, this.classVisible,
                          this.opacity);
    }
    const frame = ctx.createImageData(this.image.width, this.image.height);
    frame.data.set(rgba);
    ctx.putImageData(frame, 0, 0);
  }
}

window.addEventListener("DOMContentLoaded", () => {
  void new App().start();
});
