/** Covariate-weight bar chart, animated across arrivals.
 *
 * Plain SVG built through the DOM — no canvas, no chart library — so the
 * same code renders in any browser and in DOM test environments. Bars show
 * the normalized weight of each covariate at one moment of the trial; a
 * scrubber walks through every allocation's weights, and while it sits at
 * the newest point it follows the live trial as polling brings new points.
 * Bars are ordered by current weight so the dominant covariate reads first.
 */

import type { WeightPoint } from "./model.js";
import { formatNumber } from "./model.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const BAR_HEIGHT = 22;
const BAR_GAP = 8;
const LABEL_WIDTH = 130;
const VALUE_WIDTH = 56;
const CHART_WIDTH = 560;

export class WeightChart {
  private readonly root: HTMLElement;
  private readonly caption: HTMLElement;
  private readonly scrubber: HTMLInputElement;
  private readonly svg: SVGSVGElement;
  private readonly placeholder: HTMLElement;
  private series: WeightPoint[] = [];
  private names: string[] = [];
  private pinnedToEnd = true;

  constructor(container: HTMLElement) {
    this.root = document.createElement("div");
    this.root.className = "weight-chart";
    this.root.dataset.testid = "weight-chart";

    this.placeholder = document.createElement("p");
    this.placeholder.className = "placeholder";
    this.placeholder.dataset.testid = "weight-chart-placeholder";
    this.placeholder.textContent =
      "No covariate weights yet — they appear once a weighted design starts allocating.";

    this.svg = document.createElementNS(SVG_NS, "svg") as SVGSVGElement;
    this.svg.setAttribute("role", "img");
    this.svg.dataset.testid = "weight-chart-svg";

    this.caption = document.createElement("div");
    this.caption.className = "chart-caption";
    this.caption.dataset.testid = "weight-chart-caption";

    this.scrubber = document.createElement("input");
    this.scrubber.type = "range";
    this.scrubber.min = "0";
    this.scrubber.max = "0";
    this.scrubber.value = "0";
    this.scrubber.dataset.testid = "weight-scrubber";
    this.scrubber.addEventListener("input", () => {
      this.pinnedToEnd =
        Number(this.scrubber.value) === this.series.length - 1;
      this.draw();
    });

    this.root.append(this.placeholder, this.svg, this.caption, this.scrubber);
    container.append(this.root);
  }

  /** Replace the data and redraw; keeps the scrubber pinned to the live end
   * unless the user moved it back in time. */
  update(series: WeightPoint[], names: string[]): void {
    this.series = series;
    this.names = names;
    const last = Math.max(0, series.length - 1);
    this.scrubber.max = String(last);
    if (this.pinnedToEnd) this.scrubber.value = String(last);
    if (Number(this.scrubber.value) > last) {
      this.scrubber.value = String(last);
      this.pinnedToEnd = true;
    }
    this.draw();
  }

  /** The weights currently on screen (test hook). */
  displayedWeights(): Map<string, number> {
    const out = new Map<string, number>();
    const point = this.series[Number(this.scrubber.value)];
    if (!point) return out;
    this.names.forEach((name, j) => out.set(name, point.weights[j]));
    return out;
  }

  private draw(): void {
    const empty = this.series.length === 0;
    this.placeholder.style.display = empty ? "" : "none";
    this.svg.style.display = empty ? "none" : "";
    this.scrubber.style.display = empty ? "none" : "";
    this.caption.textContent = "";
    while (this.svg.firstChild) this.svg.removeChild(this.svg.firstChild);
    if (empty) return;

    const point = this.series[Number(this.scrubber.value)];
    const order = this.names
      .map((name, j) => ({ name, j, w: point.weights[j] ?? 0 }))
      .sort((a, b) => b.w - a.w);

    const height = order.length * (BAR_HEIGHT + BAR_GAP) + BAR_GAP;
    this.svg.setAttribute(
      "viewBox",
      `0 0 ${CHART_WIDTH} ${height}`,
    );
    this.svg.setAttribute("width", "100%");

    const trackWidth = CHART_WIDTH - LABEL_WIDTH - VALUE_WIDTH;
    order.forEach((item, row) => {
      const y = BAR_GAP + row * (BAR_HEIGHT + BAR_GAP);

      const label = document.createElementNS(SVG_NS, "text");
      label.setAttribute("x", String(LABEL_WIDTH - 8));
      label.setAttribute("y", String(y + BAR_HEIGHT * 0.72));
      label.setAttribute("text-anchor", "end");
      label.setAttribute("class", "bar-label");
      label.textContent = item.name;

      const track = document.createElementNS(SVG_NS, "rect");
      track.setAttribute("x", String(LABEL_WIDTH));
      track.setAttribute("y", String(y));
      track.setAttribute("width", String(trackWidth));
      track.setAttribute("height", String(BAR_HEIGHT));
      track.setAttribute("class", "bar-track");

      const bar = document.createElementNS(SVG_NS, "rect");
      bar.setAttribute("x", String(LABEL_WIDTH));
      bar.setAttribute("y", String(y));
      bar.setAttribute("width", String(Math.max(0, item.w) * trackWidth));
      bar.setAttribute("height", String(BAR_HEIGHT));
      bar.setAttribute("class", row === 0 ? "bar bar-dominant" : "bar");
      (bar as unknown as HTMLElement).dataset.testid = `weight-bar-${item.name}`;
      bar.setAttribute("data-weight", item.w.toFixed(6));

      const value = document.createElementNS(SVG_NS, "text");
      value.setAttribute("x", String(LABEL_WIDTH + trackWidth + 6));
      value.setAttribute("y", String(y + BAR_HEIGHT * 0.72));
      value.setAttribute("class", "bar-value");
      value.textContent = formatNumber(item.w, 3);

      this.svg.append(label, track, bar, value);
    });

    this.caption.textContent = `weights in force at entry ${point.entry_index} (${
      Number(this.scrubber.value) + 1
    }/${this.series.length})`;
  }
}
