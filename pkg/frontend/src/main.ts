import { AnnotationClient, QueryPayload } from "./client.js";
import { decodeBase64, decodePpm } from "./ppm.js";
import { SessionController, UiState } from "./session.js";
import { chooseZoom, crosshairCenter, scaleNearest } from "./zoom.js";

const $ = (id: string): HTMLElement => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el;
};

function drawQuery(canvas: HTMLCanvasElement, q: QueryPayload): void {
  const image = decodePpm(decodeBase64(q.image));
  const factor = chooseZoom(image.width, image.height);
  const scaled = scaleNearest(image, factor);
  canvas.width = scaled.width;
  canvas.height = scaled.height;
  const ctx = canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  ctx.putImageData(new ImageData(new Uint8ClampedArray(scaled.data), scaled.width, scaled.height), 0, 0);

  // instance box
  ctx.strokeStyle = "#00e5ff";
  ctx.lineWidth = 2;
  ctx.strokeRect(
    q.box.x_min * factor,
    q.box.y_min * factor,
    (q.box.x_max - q.box.x_min + 1) * factor,
    (q.box.y_max - q.box.y_min + 1) * factor,
  );

  // crosshair centered on the queried pixel's block
  const { cx, cy } = crosshairCenter(q.point.x, q.point.y, factor);
  ctx.strokeStyle = "#ff3d00";
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(cx - factor, cy);
  ctx.lineTo(cx + factor, cy);
  ctx.moveTo(cx, cy - factor);
  ctx.lineTo(cx, cy + factor);
  ctx.stroke();
  ctx.strokeRect(q.point.x * factor + 0.5, q.point.y * factor + 0.5, factor - 1, factor - 1);
}

function renderMetrics(rows: Record<string, number>[]): void {
  const panel = $("metrics");
  if (!rows.length) {
    panel.textContent = "no completed steps yet";
    return;
  }
  const cols = ["step", "n_points", "test_mean_iou", "test_map", "point_acc"];
  const lines = [cols.join("  ")];
  for (const row of rows) {
    lines.push(cols.map((c) => {
      const v = row[c];
      return typeof v === "number" && !Number.isInteger(v) ? v.toFixed(4) : String(v);
    }).join("  "));
  }
  panel.textContent = lines.join("\n");
}

function applyState(state: UiState): void {
  const banner = $("banner");
  const yes = $("yes") as HTMLButtonElement;
  const no = $("no") as HTMLButtonElement;
  const canvas = $("view") as HTMLCanvasElement;
  const enabled = state.phase === "query";
  yes.disabled = !enabled;
  no.disabled = !enabled;
  switch (state.phase) {
    case "query": {
      const q = state.query;
      banner.textContent =
        `Is the marked point on the ${q.category}? ` +
        `(step ${q.progress.step}, ${q.progress.answered}/${q.progress.answered + q.progress.pending})`;
      banner.className = "ok";
      drawQuery(canvas, q);
      break;
    }
    case "training":
      banner.textContent = "training on your answers...";
      banner.className = "busy";
      break;
    case "finished":
      banner.textContent = "session complete";
      banner.className = "ok";
      break;
    case "error":
      banner.textContent = `connection problem, retrying: ${state.message}`;
      banner.className = "retry";
      break;
    default:
      banner.textContent = "loading...";
      banner.className = "busy";
  }
}

async function start(): Promise<void> {
  const params = new URLSearchParams(location.search);
  const base = params.get("service") ?? "http://127.0.0.1:8000";
  const client = new AnnotationClient(base);

  const form = $("connect-form") as HTMLFormElement;
  form.addEventListener("submit", async (ev) => {
    ev.preventDefault();
    const dataDir = ($("data-dir") as HTMLInputElement).value;
    const runDir = ($("run-dir") as HTMLInputElement).value;
    const config = JSON.parse(($("config") as HTMLTextAreaElement).value || "{}");
    const sessionId = await client.createSession({ data_dir: dataDir, run_dir: runDir || undefined, config });
    const controller = new SessionController(client, sessionId, {
      onState: applyState,
      onMetrics: renderMetrics,
    });
    $("yes").addEventListener("click", () => void controller.submit(1));
    $("no").addEventListener("click", () => void controller.submit(0));
    document.addEventListener("keydown", (e) => void controller.handleKey(e.key));
    await controller.pollLoop();
  });
}

void start();
